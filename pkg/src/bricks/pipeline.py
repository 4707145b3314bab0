"""Incremental execution of a brick's stage graph.

``plan`` classifies every stage as fresh, stale, or blocked by comparing
recorded lockfile hashes against the workspace. ``repro`` runs exactly the
stale stages in topological order, re-planning blocked stages after their
upstreams finish so that byte-identical regenerated inputs cut the run short.
``commit_outputs`` ingests finished ``brick/`` outputs into the content cache.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Literal

from .errors import HashMismatchError, StageFailedError
from .model import (
    ContentHash,
    Lockfile,
    LockRecord,
    LockStage,
    Manifest,
    PathSpec,
    Stage,
    serialize_lockfile,
    stage_parents,
    topological_order,
)
from .store import ContentStore, hash_file, hash_tree

log = logging.getLogger(__name__)

LOCKFILE_NAME = "brick.lock"
MANIFEST_NAME = "brick.yaml"
PAYLOAD_DIR = "brick"

StageState = Literal["fresh", "stale", "blocked"]

# Reason path tokens for conditions that are not tied to a real file. They
# start with "(" so they cannot collide with workspace-relative paths, which
# never begin with one after normalization... except by pathological naming;
# they are display-only and never drive scheduling decisions.
NO_LOCK_ENTRY = "(no lock entry)"
ALWAYS_RUNS = "(no dependencies)"
COMMAND_CHANGED = "(command)"


@dataclass(frozen=True)
class StageReason:
    """One observed difference: a path with its recorded and current hashes,
    either of which may be absent."""

    path: str
    recorded: str | None
    current: str | None


@dataclass(frozen=True)
class StageStatus:
    name: str
    state: StageState
    reasons: tuple[StageReason, ...] = ()


@dataclass
class StageRun:
    name: str
    exit_code: int
    wall_time: float
    stderr_tail: str = ""
    note: str = ""

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.note


@dataclass
class RunReport:
    """What a repro did: executed and skipped partition the stage set."""

    executed: list[StageRun] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    lockfile: Lockfile = field(default_factory=Lockfile)

    @property
    def executed_names(self) -> list[str]:
        return [run.name for run in self.executed]

    @property
    def failed(self) -> list[StageRun]:
        return [run for run in self.executed if not run.ok]

    @property
    def ok(self) -> bool:
        return not self.failed


class WorkspaceHasher:
    """Hashes workspace paths at most once per run, invalidating on writes."""

    def __init__(self, workdir: Path):
        self.workdir = Path(workdir)
        self._cache: dict[str, tuple[ContentHash | None, int | None]] = {}
        self._lock = Lock()

    def current(self, relpath: str) -> tuple[ContentHash | None, int | None]:
        with self._lock:
            if relpath in self._cache:
                return self._cache[relpath]
        path = self.workdir / relpath
        if path.is_dir():
            manifest, digest = hash_tree(path)
            value = (digest, manifest.total_size)
        elif path.is_file():
            value = hash_file(path)
        else:
            value = (None, None)
        with self._lock:
            self._cache[relpath] = value
        return value

    def invalidate(self, relpath: str) -> None:
        with self._lock:
            stale = [
                key
                for key in self._cache
                if key == relpath
                or key.startswith(relpath + "/")
                or relpath.startswith(key + "/")
            ]
            for key in stale:
                del self._cache[key]


def _hash_str(value: ContentHash | None) -> str | None:
    return None if value is None else str(value)


def _stage_reasons(
    stage: Stage, lock_stage: LockStage | None, hasher: WorkspaceHasher
) -> list[StageReason]:
    """Why this stage must run, ignoring upstream state; empty means fresh.

    A stage is stale when it has no lock entry, has no dependencies (the
    always-run rule), its command drifted from the recorded one, or any
    declared dep or out is missing, changed, or no longer matches the
    recorded path set.
    """
    if lock_stage is None:
        return [StageReason(NO_LOCK_ENTRY, None, None)]
    reasons: list[StageReason] = []
    if not stage.deps:
        reasons.append(StageReason(ALWAYS_RUNS, None, None))
    if lock_stage.cmd != stage.cmd:
        reasons.append(StageReason(COMMAND_CHANGED, lock_stage.cmd, stage.cmd))

    recorded_deps = lock_stage.dep_by_path()
    for dep in stage.deps:
        record = recorded_deps.pop(dep.path, None)
        current, _ = hasher.current(dep.path)
        recorded = _hash_str(record.hash) if record else None
        if record is None or recorded != _hash_str(current):
            reasons.append(StageReason(dep.path, recorded, _hash_str(current)))
    for path, record in recorded_deps.items():  # recorded but no longer declared
        reasons.append(StageReason(path, str(record.hash), None))

    recorded_outs = lock_stage.out_by_path()
    for out in stage.outs:
        record = recorded_outs.pop(out.path, None)
        current, _ = hasher.current(out.path)
        recorded = _hash_str(record.hash) if record else None
        if record is None or recorded != _hash_str(current):
            reasons.append(StageReason(out.path, recorded, _hash_str(current)))
    for path, record in recorded_outs.items():
        reasons.append(StageReason(path, str(record.hash), None))
    return reasons


def plan(
    workdir: Path, manifest: Manifest, lockfile: Lockfile | None = None
) -> list[StageStatus]:
    """Classify every stage without running anything.

    A stage whose own checks pass but which sits downstream of a non-fresh
    stage is blocked: its verdict depends on what the upstream run produces.
    Statuses come back in manifest order.
    """
    lockfile = lockfile or Lockfile()
    order = topological_order(manifest)
    parents = stage_parents(manifest)
    hasher = WorkspaceHasher(Path(workdir))
    states: dict[str, StageStatus] = {}
    for name in order:
        stage = manifest.stages[name]
        reasons = _stage_reasons(stage, lockfile.stages.get(name), hasher)
        if reasons:
            states[name] = StageStatus(name, "stale", tuple(reasons))
            continue
        busy = sorted(p for p in parents[name] if states[p].state != "fresh")
        if busy:
            upstream = tuple(StageReason(f"(upstream {p})", None, None) for p in busy)
            states[name] = StageStatus(name, "blocked", upstream)
        else:
            states[name] = StageStatus(name, "fresh")
    return [states[name] for name in manifest.stages]


def _record(path_spec: PathSpec, hasher: WorkspaceHasher) -> LockRecord | None:
    digest, size = hasher.current(path_spec.path)
    if digest is None or size is None:
        return None
    return LockRecord(path=path_spec.path, hash=digest, size=size)


def _descendants(parents: dict[str, set[str]], roots: set[str]) -> set[str]:
    children: dict[str, set[str]] = {name: set() for name in parents}
    for child, ups in parents.items():
        for up in ups:
            children[up].add(child)
    seen: set[str] = set()
    frontier = list(roots)
    while frontier:
        node = frontier.pop()
        for child in children[node]:
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return seen


class _StageExecutor:
    """Runs one stage command in the workspace, teeing output to a log."""

    def __init__(self, workdir: Path, log_dir: str):
        self.workdir = Path(workdir)
        self.log_dir = self.workdir / log_dir

    def run(self, stage: Stage) -> StageRun:
        env = dict(os.environ)
        env["BRICK_WORKDIR"] = str(self.workdir)
        start = time.perf_counter()
        proc = subprocess.run(
            stage.cmd,
            shell=True,
            cwd=self.workdir,
            env=env,
            capture_output=True,
        )
        wall = time.perf_counter() - start
        self.log_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.log_dir / f"{stage.name}.log"
        with open(log_path, "wb") as fh:
            fh.write(f"$ {stage.cmd}\n".encode())
            fh.write(b"--- stdout ---\n")
            fh.write(proc.stdout)
            fh.write(b"--- stderr ---\n")
            fh.write(proc.stderr)
        stderr_tail = proc.stderr[-4096:].decode("utf-8", "replace")
        return StageRun(stage.name, proc.returncode, wall, stderr_tail)

    def journal(self, run: StageRun) -> None:
        self.log_dir.mkdir(parents=True, exist_ok=True)
        entry = {
            "stage": run.name,
            "exit_code": run.exit_code,
            "wall_time": round(run.wall_time, 6),
            "note": run.note,
        }
        with open(self.log_dir / "journal.ndjson", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")


def _finish_stage(
    stage: Stage, run: StageRun, hasher: WorkspaceHasher
) -> LockStage | None:
    """Re-hash a successful stage's paths into a fresh lock entry."""
    if run.exit_code != 0:
        return None
    for out in stage.outs:
        hasher.invalidate(out.path)
    deps: list[LockRecord] = []
    for dep in stage.deps:
        record = _record(dep, hasher)
        if record is None:
            run.note = f"declared dependency missing after run: {dep.path}"
            return None
        deps.append(record)
    outs: list[LockRecord] = []
    for out in stage.outs:
        record = _record(out, hasher)
        if record is None:
            run.note = f"declared output not produced: {out.path}"
            return None
        outs.append(record)
    return LockStage(cmd=stage.cmd, deps=tuple(deps), outs=tuple(outs))


def repro(
    workdir: Path,
    manifest: Manifest,
    lockfile: Lockfile | None = None,
    *,
    jobs: int = 1,
    log_dir: str = "logs",
) -> RunReport:
    """Run every stale stage in dependency order and rewrite ``brick.lock``.

    Blocked stages are re-checked after their upstreams complete and skipped
    when the regenerated inputs turn out byte-identical (early cutoff). A
    failing stage stops everything downstream of it, keeps the previous lock
    entries for stages that did not run, and raises StageFailedError carrying
    the partial report. With ``jobs`` > 1, stages in the same dependency wave
    run concurrently.
    """
    workdir = Path(workdir)
    old_lock = lockfile or Lockfile()
    order = topological_order(manifest)
    parents = stage_parents(manifest)
    hasher = WorkspaceHasher(workdir)
    executor = _StageExecutor(workdir, log_dir)

    # Wave index: stages in one wave share no ordering relation.
    wave: dict[str, int] = {}
    for name in order:
        wave[name] = 1 + max((wave[p] for p in parents[name]), default=-1)

    new_stages: dict[str, LockStage] = {}
    report = RunReport()
    broken: set[str] = set()  # failed stages and everything downstream

    def attempt(name: str) -> tuple[str, StageRun | None]:
        stage = manifest.stages[name]
        reasons = _stage_reasons(stage, old_lock.stages.get(name), hasher)
        if not reasons:
            return name, None
        log.info("running stage %s: %s", name, stage.cmd)
        return name, executor.run(stage)

    max_wave = max(wave.values(), default=-1)
    for level in range(max_wave + 1):
        names = [n for n in order if wave[n] == level]
        runnable = [n for n in names if n not in broken]
        if jobs > 1 and len(runnable) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(attempt, runnable))
        else:
            outcomes = [attempt(n) for n in runnable]
        for name in names:
            if name in broken:
                report.skipped.append(name)
                if name in old_lock.stages:
                    new_stages[name] = old_lock.stages[name]
                continue
            run = dict(outcomes)[name]
            if run is None:
                report.skipped.append(name)
                new_stages[name] = old_lock.stages[name]
                continue
            fresh_entry = _finish_stage(manifest.stages[name], run, hasher)
            executor.journal(run)
            report.executed.append(run)
            if fresh_entry is None:
                broken.add(name)
                broken |= _descendants(parents, {name})
                if name in old_lock.stages:
                    new_stages[name] = old_lock.stages[name]
                log.warning("stage %s failed (exit %d)", name, run.exit_code)
            else:
                new_stages[name] = fresh_entry

    report.lockfile = Lockfile(
        {name: new_stages[name] for name in manifest.stages if name in new_stages}
    )
    (workdir / LOCKFILE_NAME).write_bytes(serialize_lockfile(report.lockfile))
    if not report.ok:
        first = report.failed[0]
        raise StageFailedError(
            f"stage {first.name!r} failed (exit {first.exit_code})"
            + (f": {first.note}" if first.note else ""),
            report=report,
        )
    return report


def commit_outputs(
    workdir: Path, lockfile: Lockfile, store: ContentStore
) -> list[ContentHash]:
    """Ingest every ``brick/`` out (and its dir manifest, for directories)
    into the content cache, verifying nothing drifted since the lock was
    written. Returns the digests in lock order."""
    workdir = Path(workdir)
    store.ensure()
    digests: list[ContentHash] = []
    for rec in lockfile.outs_under(PAYLOAD_DIR):
        path = workdir / rec.path
        if rec.hash.is_dir:
            if not path.is_dir():
                raise HashMismatchError(f"{rec.path} is no longer a directory")
            manifest, digest = hash_tree(path)
            if digest != rec.hash:
                raise HashMismatchError(
                    f"{rec.path} hashes to {digest}, lock records {rec.hash}"
                )
            for entry in manifest.entries:
                store.put_file(path / entry.relpath)
            store.put_blob(manifest.canonical_bytes())
        else:
            if not path.is_file():
                raise HashMismatchError(f"{rec.path} missing from workspace")
            digest, _ = hash_file(path)
            if digest != rec.hash:
                raise HashMismatchError(
                    f"{rec.path} hashes to {digest}, lock records {rec.hash}"
                )
            store.put_file(path)
        digests.append(rec.hash)
    return digests
