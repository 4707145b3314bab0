"""Library layout, the four-step install algorithm, and dependency workflows.

An install proceeds snapshot -> enumerate -> fetch -> link inside a staging
directory and becomes visible through one atomic rename, so the library never
exposes a partially installed brick. Blobs already cached are never fetched
again, which is what makes append-only bricks cheap to update.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from filelock import FileLock

from .errors import (
    AmbiguousPrefixError,
    AssetNameCollisionError,
    NotFoundError,
    NotInstalledError,
    PullError,
)
from .model import (
    LATEST,
    BrickRef,
    DepEntry,
    DependencySet,
    Lockfile,
    is_full_commit,
    parse_dependencies,
    parse_lockfile,
    serialize_dependencies,
    DEPS_HEADER,
)
from .pipeline import LOCKFILE_NAME, PAYLOAD_DIR
from .registry import RegistryClient
from .store import ContentStore

log = logging.getLogger(__name__)

STAMP_NAME = ".installed"
DEPS_DIR = ".bb"
DEPS_FILE = "dependencies.txt"

FORMAT_TAGS = {".parquet": "parquet", ".sqlite": "sqlite", ".hdt": "hdt"}

InstallStep = str  # "snapshot" | "enumerate" | "fetch" | "link"
STEPS: tuple[InstallStep, ...] = ("snapshot", "enumerate", "fetch", "link")


@dataclass(frozen=True)
class LibraryLayout:
    """On-disk tree ``{root}/{org}/{name}/{commit}`` plus ``{root}/cache``."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root).absolute())

    @property
    def cache(self) -> Path:
        return self.root / "cache"

    @property
    def staging(self) -> Path:
        return self.root / ".staging"

    def brick_dir(self, org: str, name: str, commit: str) -> Path:
        return self.root / org / name / commit

    def stamp_path(self, org: str, name: str, commit: str) -> Path:
        return self.brick_dir(org, name, commit) / STAMP_NAME

    def is_installed(self, org: str, name: str, commit: str) -> bool:
        return self.stamp_path(org, name, commit).is_file()

    def installed_commits(self, org: str, name: str) -> list[tuple[str, str]]:
        """(commit, installed_at) pairs for every complete install."""
        base = self.root / org / name
        found = []
        if base.is_dir():
            for entry in sorted(base.iterdir()):
                stamp = entry / STAMP_NAME
                if is_full_commit(entry.name) and stamp.is_file():
                    meta = json.loads(stamp.read_text())
                    found.append((entry.name, meta.get("installed_at", "")))
        return found

@dataclass
class InstallResult:
    """Where a brick landed plus what the install had to transfer."""

    path: Path
    org: str
    name: str
    commit: str
    blobs_fetched: int = 0
    blobs_total: int = 0
    manifests_fetched: int = 0
    snapshot_bytes: int = 0
    already_installed: bool = False
    copied_paths: list[str] = field(default_factory=list)

    def __fspath__(self) -> str:
        return str(self.path)


@dataclass(frozen=True)
class AssetEntry:
    name: str
    path: Path
    format: str


@dataclass(frozen=True)
class AssetCatalog:
    """Logical asset name -> materialized path and format tag."""

    entries: dict[str, AssetEntry]

    def __iter__(self):
        return iter(self.entries.values())

    def to_json(self) -> dict:
        return {
            e.name: {"path": str(e.path), "format": e.format} for e in self
        }


def logical_asset_name(path_under_payload: str) -> str:
    """Mangle a payload-relative path into its logical name: every ``/`` and
    ``.`` becomes ``_``."""
    return path_under_payload.replace("/", "_").replace(".", "_")


def format_tag(path: str) -> str:
    return FORMAT_TAGS.get(Path(path).suffix.lower(), "other")


def _catalog_from_lock(lock: Lockfile, brick_dir: Path) -> AssetCatalog:
    entries: dict[str, AssetEntry] = {}
    sources: dict[str, str] = {}
    for rec in lock.outs_under(PAYLOAD_DIR):
        rel = rec.path[len(PAYLOAD_DIR) + 1 :]
        if not rel:
            continue
        name = logical_asset_name(rel)
        if name in entries:
            raise AssetNameCollisionError(
                f"assets {sources[name]!r} and {rec.path!r} both mangle to {name!r}"
            )
        sources[name] = rec.path
        entries[name] = AssetEntry(
            name=name, path=brick_dir / rec.path, format=format_tag(rec.path)
        )
    return AssetCatalog(entries)


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def install(
    lib: LibraryLayout,
    client: RegistryClient,
    ref: BrickRef,
    *,
    step_callback: Callable[[InstallStep], None] | None = None,
) -> InstallResult:
    """Install one brick version; a no-op when that exact commit is present.

    The four steps run in a staging directory: (1) fetch the commit snapshot,
    (2) enumerate the lockfile's payload outs, (3) fetch every blob the cache
    is missing, (4) link the payload into place. Only then does a rename make
    the brick visible. ``step_callback`` fires after each step, in order.
    """
    org, name = ref.org, ref.name
    commit = ref.commit if is_full_commit(ref.commit) else client.resolve_commit(ref)

    def done(result: InstallResult) -> InstallResult:
        log.info(
            "installed %s/%s@%s (%d/%d blobs fetched)",
            org, name, commit, result.blobs_fetched, result.blobs_total,
        )
        return result

    final_dir = lib.brick_dir(org, name, commit)
    if lib.is_installed(org, name, commit):
        log.info("already installed: %s/%s@%s", org, name, commit)
        return InstallResult(
            path=final_dir, org=org, name=name, commit=commit, already_installed=True
        )

    store = ContentStore(lib.cache)
    store.ensure()
    lib.staging.mkdir(parents=True, exist_ok=True)
    lock_path = lib.staging / f"{org}~{name}~{commit}.lock"

    with FileLock(str(lock_path)):
        if lib.is_installed(org, name, commit):
            return InstallResult(
                path=final_dir, org=org, name=name, commit=commit,
                already_installed=True,
            )
        staging = lib.staging / f"{org}~{name}~{commit}~{uuid.uuid4().hex[:8]}"
        staging.mkdir()
        try:
            result = _install_steps(
                lib, client, store, org, name, commit, staging, step_callback
            )
            final_dir.parent.mkdir(parents=True, exist_ok=True)
            os.replace(staging, final_dir)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
    return done(result)


def _install_steps(
    lib: LibraryLayout,
    client: RegistryClient,
    store: ContentStore,
    org: str,
    name: str,
    commit: str,
    staging: Path,
    step_callback: Callable[[InstallStep], None] | None,
) -> InstallResult:
    def step(which: InstallStep) -> None:
        log.info("install %s/%s@%s step=%s", org, name, commit, which,
                 extra={"install_step": which})
        if step_callback is not None:
            step_callback(which)

    result = InstallResult(
        path=lib.brick_dir(org, name, commit), org=org, name=name, commit=commit
    )

    # 1. snapshot: the commit's code/metadata tree.
    result.snapshot_bytes = client.fetch_snapshot(org, name, commit, staging)
    step("snapshot")

    # 2. enumerate payload outs; name collisions abort before anything lands.
    lock = parse_lockfile((staging / LOCKFILE_NAME).read_bytes())
    payload = lock.outs_under(PAYLOAD_DIR)
    _catalog_from_lock(lock, staging)
    step("enumerate")

    # 3. fetch whatever the cache is missing: directory manifests first (they
    #    name the member blobs), then all data blobs in parallel.
    data_digests = []
    for rec in payload:
        if rec.hash.is_dir:
            if not store.has(rec.hash):
                client.fetch_blob_to_store(store, rec.hash)
                result.manifests_fetched += 1
            manifest = store.read_dir_manifest(rec.hash)
            data_digests.extend(entry.hash for entry in manifest.entries)
        else:
            data_digests.append(rec.hash)
    distinct = {d.digest for d in data_digests}
    result.blobs_total = len(distinct)
    result.blobs_fetched = client.fetch_blobs(store, data_digests)
    step("fetch")

    # 4. link the payload into the staging tree, then stamp it complete.
    for rec in payload:
        copied = store.materialize(rec.hash, staging / rec.path)
        result.copied_paths.extend(copied)
    stamp = {
        "installed_at": _utc_now(),
        "commit": commit,
        "copied": result.copied_paths,
    }
    (staging / STAMP_NAME).write_text(json.dumps(stamp, indent=2) + "\n")
    step("link")
    return result


# ---------------------------------------------------------------------------
# Asset enumeration


def _select_installed_commit(lib: LibraryLayout, ref: BrickRef) -> str:
    installed = lib.installed_commits(ref.org, ref.name)
    if not installed:
        raise NotInstalledError(
            f"{ref.slug()} is not installed; run: bricks install {ref.slug()}"
        )
    if ref.commit == LATEST:
        # Newest install wins, by stamp timestamp (ISO text sorts correctly).
        return max(installed, key=lambda pair: (pair[1], pair[0]))[0]
    matches = [c for c, _ in installed if c.startswith(ref.commit)]
    if not matches:
        raise NotInstalledError(
            f"no installed commit of {ref.slug()} matches {ref.commit!r}; "
            f"run: bricks install {ref.render()}"
        )
    if len(matches) > 1:
        raise AmbiguousPrefixError(
            f"prefix {ref.commit!r} matches {len(matches)} installed commits"
        )
    return matches[0]


def assets(lib: LibraryLayout, ref: BrickRef) -> AssetCatalog:
    """Catalog of one installed brick's payload assets.

    A ``latest`` ref selects the most recently installed commit; a prefix
    must match exactly one installed commit.
    """
    commit = _select_installed_commit(lib, ref)
    brick_dir = lib.brick_dir(ref.org, ref.name, commit)
    lock = parse_lockfile((brick_dir / LOCKFILE_NAME).read_bytes())
    return _catalog_from_lock(lock, brick_dir)


# ---------------------------------------------------------------------------
# Dependency workflows


def _deps_path(workdir: Path) -> Path:
    return Path(workdir) / DEPS_DIR / DEPS_FILE


def deps_init(workdir: Path) -> Path:
    """Create ``.bb/dependencies.txt`` (with a header comment) if absent."""
    path = _deps_path(workdir)
    if path.parent.exists() and not path.parent.is_dir():
        raise OSError(f"{path.parent} exists and is not a directory")
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists():
        path.write_text(DEPS_HEADER)
    return path


def read_deps(workdir: Path) -> DependencySet:
    path = _deps_path(workdir)
    if not path.is_file():
        raise NotFoundError(f"{path} does not exist; run: bricks init")
    return parse_dependencies(path.read_bytes())


def deps_add(workdir: Path, client: RegistryClient, ref: BrickRef) -> DependencySet:
    """Pin ``ref`` (resolved to a full commit) into the dependency file.

    Re-adding an existing (org, name) updates its pin in place.
    """
    deps = read_deps(workdir)
    commit = client.resolve_commit(ref)
    url = ref.source_url or f"{client.endpoint.base_url}/api/{ref.org}/{ref.name}"
    entry = DepEntry(ref=BrickRef(ref.org, ref.name, commit), url=url)
    previous = deps.get(ref.org, ref.name)
    updated = deps.upsert(entry)
    _deps_path(workdir).write_bytes(serialize_dependencies(updated))
    if previous is not None and previous.ref.commit != commit:
        log.info("updated pin %s: %s -> %s", ref.slug(), previous.ref.commit, commit)
    else:
        log.info("pinned %s@%s", ref.slug(), commit)
    return updated


def deps_pull(
    workdir: Path, lib: LibraryLayout, client: RegistryClient
) -> list[InstallResult]:
    """Install every pinned dependency not already present, in file order.

    Failures do not stop the pull; they are aggregated into one PullError
    that still carries the successful per-entry results.
    """
    deps = read_deps(workdir)
    results: list[InstallResult] = []
    failures: dict[str, Exception] = {}
    for entry in deps.entries:
        ref = entry.ref
        try:
            results.append(install(lib, client, ref))
        except Exception as exc:  # aggregate, report at the end
            failures[ref.slug()] = exc
    if failures:
        summary = "; ".join(f"{slug}: {exc}" for slug, exc in failures.items())
        raise PullError(
            f"{len(failures)} of {len(deps.entries)} dependencies failed: {summary}",
            failures=failures,
            results=results,
        )
    return results


def referenced_digests(lib: LibraryLayout) -> set[str]:
    """Every digest any installed brick's lockfile can reach: payload outs,
    directory manifests, and their members."""
    store = ContentStore(lib.cache)
    referenced: set[str] = set()
    for lock_path in lib.root.glob(f"*/*/*/{LOCKFILE_NAME}"):
        if not (lock_path.parent / STAMP_NAME).is_file():
            continue
        lock = parse_lockfile(lock_path.read_bytes())
        for rec in lock.outs_under(PAYLOAD_DIR):
            referenced.add(rec.hash.digest)
            if rec.hash.is_dir and store.has(rec.hash):
                manifest = store.read_dir_manifest(rec.hash)
                referenced.update(e.hash.digest for e in manifest.entries)
    return referenced
