"""Brick-defining file formats and the brick coordinate grammar.

Three text formats describe a brick: the manifest (``brick.yaml``) declares
pipeline stages, the lockfile (``brick.lock``) records the hashes those stages
produced, and ``.bb/dependencies.txt`` pins upstream bricks to exact commits.
All parsers here are pure functions over byte buffers; every value type is
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import yaml

from .errors import (
    BadHashError,
    CycleError,
    DuplicateEntryError,
    DuplicateOutputError,
    MalformedRefError,
    ParseError,
    UnpinnedEntryError,
)

_IDENT_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_HEX32_RE = re.compile(r"^[0-9a-f]{32}$")
_HEX40_RE = re.compile(r"^[0-9a-f]{40}$")
_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")
_URL_RE = re.compile(r"^[a-z][a-z0-9+]*://", re.IGNORECASE)

#: Shortest commit prefix accepted anywhere a commit may be abbreviated.
MIN_COMMIT_PREFIX = 5

LATEST = "latest"


def is_identifier(text: str) -> bool:
    return bool(_IDENT_RE.match(text))


def is_full_commit(text: str) -> bool:
    return bool(_HEX40_RE.match(text))


# ---------------------------------------------------------------------------
# BrickRef


@dataclass(frozen=True)
class BrickRef:
    """Coordinate of one brick version: (org, name, commit-or-latest).

    ``commit`` is either the sentinel ``"latest"``, a unique hex prefix of at
    least five characters, or a full 40-hex commit id. ``source_url`` is an
    optional explicit location override for bricks hosted outside the
    configured registry's default namespace.
    """

    org: str
    name: str
    commit: str = LATEST
    source_url: str | None = None

    def __post_init__(self):
        if not is_identifier(self.org):
            raise MalformedRefError(f"bad org {self.org!r}")
        if not is_identifier(self.name):
            raise MalformedRefError(f"bad name {self.name!r}")
        if self.commit != LATEST:
            if not _HEX_RE.match(self.commit):
                raise MalformedRefError(f"commit {self.commit!r} is not hex")
            if len(self.commit) < MIN_COMMIT_PREFIX:
                raise MalformedRefError(
                    f"commit prefix {self.commit!r} shorter than "
                    f"{MIN_COMMIT_PREFIX} characters"
                )
            if len(self.commit) > 40:
                raise MalformedRefError(f"commit {self.commit!r} longer than 40 hex chars")
            object.__setattr__(self, "commit", self.commit.lower())

    @property
    def is_pinned(self) -> bool:
        return is_full_commit(self.commit)

    def with_commit(self, commit: str) -> "BrickRef":
        return BrickRef(self.org, self.name, commit, self.source_url)

    def slug(self) -> str:
        return f"{self.org}/{self.name}"

    def render(self) -> str:
        """Render back to a string the parser accepts (round-trip identity)."""
        if self.source_url is not None:
            base = self.source_url
        else:
            base = f"{self.org}/{self.name}"
        if self.commit == LATEST:
            return base
        return f"{base}@{self.commit}"


def _split_commit_suffix(text: str) -> tuple[str, str]:
    """Split a trailing ``@<commit>`` off, returning (body, commit)."""
    head, sep, tail = text.rpartition("@")
    if not sep:
        return text, LATEST
    if tail == LATEST:
        return head, LATEST
    if not _HEX_RE.match(tail or ""):
        raise MalformedRefError(f"commit suffix {tail!r} is not hex")
    return head, tail


def parse_brick_ref(text: str, default_org: str) -> BrickRef:
    """Parse a brick coordinate: bare name, org/name, either with ``@<commit>``,
    or a full URL with an optional trailing ``@<commit>``.

    A bare name resolves against ``default_org``; a missing commit means
    ``latest``.
    """
    if not text or not text.strip():
        raise MalformedRefError("empty brick reference")
    text = text.strip()

    if _URL_RE.match(text):
        # Only an @ after the last path separator can be a commit suffix;
        # earlier @s are userinfo.
        slash = text.rfind("/")
        at = text.rfind("@")
        if at > slash:
            url, commit = _split_commit_suffix(text)
        else:
            url, commit = text, LATEST
        path = url.split("://", 1)[1]
        segments = [s for s in path.split("/") if s][1:]  # drop host
        if len(segments) < 2:
            raise MalformedRefError(f"URL {url!r} has no org/name path")
        org, name = segments[-2], segments[-1]
        if name.endswith(".git"):
            name = name[: -len(".git")]
        return BrickRef(org, name, commit, source_url=url)

    body, commit = _split_commit_suffix(text)
    parts = body.split("/")
    if len(parts) == 1:
        org, name = default_org, parts[0]
    elif len(parts) == 2:
        org, name = parts
    else:
        raise MalformedRefError(f"too many path segments in {text!r}")
    return BrickRef(org, name, commit)


# ---------------------------------------------------------------------------
# ContentHash


@dataclass(frozen=True)
class ContentHash:
    """A lowercase 32-hex MD5 digest; ``is_dir`` marks directory manifests.

    Directory digests are rendered with a ``.dir`` suffix and always name the
    canonical serialization of a directory manifest, never raw file bytes.
    """

    digest: str
    is_dir: bool = False

    def __post_init__(self):
        if not _HEX32_RE.match(self.digest):
            raise BadHashError(f"digest {self.digest!r} is not 32 lowercase hex chars")

    def __str__(self) -> str:
        return self.digest + ".dir" if self.is_dir else self.digest

    @classmethod
    def parse(cls, text: str) -> "ContentHash":
        if text.endswith(".dir"):
            return cls(text[: -len(".dir")], is_dir=True)
        return cls(text)


# ---------------------------------------------------------------------------
# Workspace paths


@dataclass(frozen=True)
class PathSpec:
    """A normalized workspace-relative path; ``is_dir`` mirrors a trailing
    slash in the manifest text."""

    path: str
    is_dir: bool = False

    def __post_init__(self):
        p = self.path
        if not p:
            raise ParseError("empty path")
        if p.startswith("/"):
            raise ParseError(f"absolute path not allowed: {p!r}")
        segments = p.split("/")
        if any(s in ("", ".", "..") for s in segments):
            raise ParseError(f"path {p!r} has empty, '.' or '..' segments")

    def render(self) -> str:
        return self.path + "/" if self.is_dir else self.path

    @classmethod
    def parse(cls, text: str) -> "PathSpec":
        if not isinstance(text, str) or not text:
            raise ParseError(f"bad path value {text!r}")
        is_dir = text.endswith("/")
        text = text.rstrip("/")
        while text.startswith("./"):
            text = text[2:]
        return cls(text, is_dir=is_dir)


def normalize_rel_path(text: str) -> str:
    """Normalize a workspace-relative path, dropping any directory marker."""
    return PathSpec.parse(text).path


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class Stage:
    """One pipeline stage: a shell command plus its declared deps and outs."""

    name: str
    cmd: str
    deps: tuple[PathSpec, ...] = ()
    outs: tuple[PathSpec, ...] = ()

    def __post_init__(self):
        if not is_identifier(self.name):
            raise ParseError(f"bad stage name {self.name!r}")
        if not isinstance(self.cmd, str) or not self.cmd.strip():
            raise ParseError(f"stage {self.name!r} has no command")
        object.__setattr__(self, "deps", tuple(self.deps))
        object.__setattr__(self, "outs", tuple(self.outs))
        dep_paths = {d.path for d in self.deps}
        out_paths = {o.path for o in self.outs}
        both = dep_paths & out_paths
        if both:
            raise ParseError(
                f"stage {self.name!r} lists {sorted(both)} as both dep and out"
            )


@dataclass(frozen=True)
class Manifest:
    """Ordered stages forming an acyclic build graph.

    An edge A -> B exists whenever an out of A equals, or is a prefix
    directory of, a dep of B. Each output path belongs to at most one stage.
    """

    stages: dict[str, Stage] = field(default_factory=dict)

    def __post_init__(self):
        for key, stage in self.stages.items():
            if key != stage.name:
                raise ParseError(f"stage key {key!r} != stage name {stage.name!r}")
        producer_of_output(self)  # raises DuplicateOutputError
        topological_order(self)  # raises CycleError


def producer_of_output(manifest: Manifest) -> dict[str, str]:
    """Map every output path to the single stage that produces it."""
    producers: dict[str, str] = {}
    for stage in manifest.stages.values():
        for out in stage.outs:
            if out.path in producers:
                raise DuplicateOutputError(
                    f"output {out.path!r} claimed by both "
                    f"{producers[out.path]!r} and {stage.name!r}"
                )
            producers[out.path] = stage.name
    return producers


def stage_parents(manifest: Manifest) -> dict[str, set[str]]:
    """Direct upstream stages of each stage, derived from path overlap."""
    producers = producer_of_output(manifest)
    outs = list(producers.items())  # (out_path, producer)
    parents: dict[str, set[str]] = {name: set() for name in manifest.stages}
    for stage in manifest.stages.values():
        for dep in stage.deps:
            for out_path, producer in outs:
                if dep.path == out_path or dep.path.startswith(out_path + "/"):
                    parents[stage.name].add(producer)
    return parents


def topological_order(manifest: Manifest) -> list[str]:
    """Stage names in dependency order, manifest order breaking ties."""
    parents = stage_parents(manifest)
    remaining = dict(parents)
    order: list[str] = []
    placed: set[str] = set()
    while remaining:
        ready = [n for n in manifest.stages if n in remaining and remaining[n] <= placed]
        if not ready:
            raise CycleError(f"stage graph has a cycle among {sorted(remaining)}")
        for name in ready:
            order.append(name)
            placed.add(name)
            del remaining[name]
    return order


def _load_yaml(data: bytes) -> object:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc}") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"bad YAML: {exc}") from exc


def _string_list(value: object, what: str) -> list[str]:
    if value is None:
        return []
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ParseError(f"{what} must be a list of strings")
    return value


def parse_manifest(data: bytes) -> Manifest:
    """Parse ``brick.yaml`` bytes into a validated Manifest.

    Raises ParseError for format problems, CycleError for a cyclic stage
    graph, and DuplicateOutputError when two stages claim one path.
    """
    doc = _load_yaml(data)
    if not isinstance(doc, dict) or set(doc) != {"stages"}:
        raise ParseError("manifest must be a mapping with a single 'stages' key")
    raw = doc["stages"]
    if not isinstance(raw, dict):
        raise ParseError("'stages' must be a mapping")
    stages: dict[str, Stage] = {}
    for name, body in raw.items():
        if not isinstance(name, str):
            raise ParseError(f"stage name {name!r} is not a string (quote it)")
        if not isinstance(body, dict):
            raise ParseError(f"stage {name!r} must be a mapping")
        unknown = set(body) - {"cmd", "deps", "outs"}
        if unknown:
            raise ParseError(f"stage {name!r} has unknown keys {sorted(unknown)}")
        if "cmd" not in body or not isinstance(body["cmd"], str):
            raise ParseError(f"stage {name!r} needs a string 'cmd'")
        deps = tuple(PathSpec.parse(p) for p in _string_list(body.get("deps"), "deps"))
        outs = tuple(PathSpec.parse(p) for p in _string_list(body.get("outs"), "outs"))
        stages[name] = Stage(name=name, cmd=body["cmd"], deps=deps, outs=outs)
    return Manifest(stages)


def _scalar(value: str) -> str:
    # JSON string quoting is valid YAML and keeps serialization canonical.
    return json.dumps(value, ensure_ascii=False)


def serialize_manifest(manifest: Manifest) -> bytes:
    """Canonical ``brick.yaml`` bytes; parse(serialize(m)) == m."""
    if not manifest.stages:
        return b"stages: {}\n"
    lines = ["stages:"]
    for name, stage in manifest.stages.items():
        lines.append(f"  {_scalar(name)}:")
        lines.append(f"    cmd: {_scalar(stage.cmd)}")
        if stage.deps:
            lines.append("    deps:")
            lines.extend(f"      - {_scalar(d.render())}" for d in stage.deps)
        if stage.outs:
            lines.append("    outs:")
            lines.extend(f"      - {_scalar(o.render())}" for o in stage.outs)
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Lockfile


@dataclass(frozen=True)
class LockRecord:
    """Recorded state of one dep or out path: digest plus size in bytes."""

    path: str
    hash: ContentHash
    size: int

    def __post_init__(self):
        normalized = normalize_rel_path(self.path)
        object.__setattr__(self, "path", normalized)
        if not isinstance(self.size, int) or isinstance(self.size, bool) or self.size < 0:
            raise ParseError(f"bad size {self.size!r} for {self.path!r}")


@dataclass(frozen=True)
class LockStage:
    """Lock entry for one stage: the command it ran plus dep/out records."""

    cmd: str | None
    deps: tuple[LockRecord, ...] = ()
    outs: tuple[LockRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "deps", tuple(self.deps))
        object.__setattr__(self, "outs", tuple(self.outs))

    def dep_by_path(self) -> dict[str, LockRecord]:
        return {r.path: r for r in self.deps}

    def out_by_path(self) -> dict[str, LockRecord]:
        return {r.path: r for r in self.outs}


@dataclass(frozen=True)
class Lockfile:
    """Recorded hashes for every stage; the source of truth for brick assets."""

    stages: dict[str, LockStage] = field(default_factory=dict)

    def outs_under(self, prefix: str) -> list[LockRecord]:
        """All out records whose path sits under ``prefix`` (e.g. 'brick')."""
        found = []
        for stage in self.stages.values():
            for rec in stage.outs:
                if rec.path == prefix or rec.path.startswith(prefix + "/"):
                    found.append(rec)
        return found


def _parse_lock_record(item: object) -> LockRecord:
    if not isinstance(item, dict) or set(item) != {"path", "md5", "size"}:
        raise ParseError(f"lock record must have exactly path/md5/size: {item!r}")
    if not isinstance(item["path"], str):
        raise ParseError(f"bad lock record path {item['path']!r}")
    if not isinstance(item["md5"], str):
        raise BadHashError(f"digest {item['md5']!r} is not a string")
    digest = ContentHash.parse(item["md5"])
    size = item["size"]
    if not isinstance(size, int) or isinstance(size, bool) or size < 0:
        raise ParseError(f"bad size {size!r} in lock record for {item['path']!r}")
    return LockRecord(path=item["path"], hash=digest, size=size)


def parse_lockfile(data: bytes) -> Lockfile:
    """Parse ``brick.lock`` bytes; serialize(parse(x)) is byte-identical for
    canonically formatted input."""
    doc = _load_yaml(data)
    if not isinstance(doc, dict) or set(doc) != {"stages"}:
        raise ParseError("lockfile must be a mapping with a single 'stages' key")
    raw = doc["stages"]
    if not isinstance(raw, dict):
        raise ParseError("'stages' must be a mapping")
    stages: dict[str, LockStage] = {}
    for name, body in raw.items():
        if not isinstance(name, str):
            raise ParseError(f"stage name {name!r} is not a string (quote it)")
        if not isinstance(body, dict):
            raise ParseError(f"lock stage {name!r} must be a mapping")
        unknown = set(body) - {"cmd", "deps", "outs"}
        if unknown:
            raise ParseError(f"lock stage {name!r} has unknown keys {sorted(unknown)}")
        cmd = body.get("cmd")
        if cmd is not None and not isinstance(cmd, str):
            raise ParseError(f"lock stage {name!r} cmd must be a string")
        deps = body.get("deps") or []
        outs = body.get("outs") or []
        if not isinstance(deps, list) or not isinstance(outs, list):
            raise ParseError(f"lock stage {name!r} deps/outs must be lists")
        stages[name] = LockStage(
            cmd=cmd,
            deps=tuple(_parse_lock_record(i) for i in deps),
            outs=tuple(_parse_lock_record(i) for i in outs),
        )
    return Lockfile(stages)


def _emit_lock_records(lines: list[str], key: str, records: tuple[LockRecord, ...]):
    if not records:
        return
    lines.append(f"    {key}:")
    for rec in records:
        lines.append(f"      - path: {_scalar(rec.path)}")
        lines.append(f"        md5: {_scalar(str(rec.hash))}")
        lines.append(f"        size: {rec.size}")


def serialize_lockfile(lock: Lockfile) -> bytes:
    """Canonical ``brick.lock`` bytes; parse(serialize(l)) == l."""
    if not lock.stages:
        return b"stages: {}\n"
    lines = ["stages:"]
    for name, stage in lock.stages.items():
        lines.append(f"  {_scalar(name)}:")
        if stage.cmd is not None:
            lines.append(f"    cmd: {_scalar(stage.cmd)}")
        _emit_lock_records(lines, "deps", stage.deps)
        _emit_lock_records(lines, "outs", stage.outs)
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Dependency set


DEPS_HEADER = (
    "# pinned data dependencies, one per line:\n"
    "# <org>/<name> <commit> <source-url>\n"
)


@dataclass(frozen=True)
class DepEntry:
    ref: BrickRef
    url: str

    def __post_init__(self):
        if not self.ref.is_pinned:
            raise UnpinnedEntryError(
                f"{self.ref.slug()} commit {self.ref.commit!r} is not a full 40-hex id"
            )


@dataclass(frozen=True)
class DependencySet:
    """Ordered, pinned upstream bricks; (org, name) unique across entries."""

    entries: tuple[DepEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[tuple[str, str]] = set()
        for entry in self.entries:
            key = (entry.ref.org, entry.ref.name)
            if key in seen:
                raise DuplicateEntryError(f"{entry.ref.slug()} listed twice")
            seen.add(key)

    def get(self, org: str, name: str) -> DepEntry | None:
        for entry in self.entries:
            if (entry.ref.org, entry.ref.name) == (org, name):
                return entry
        return None

    def upsert(self, entry: DepEntry) -> "DependencySet":
        """Replace the pin for entry's (org, name), or append it."""
        out, replaced = [], False
        for existing in self.entries:
            if (existing.ref.org, existing.ref.name) == (entry.ref.org, entry.ref.name):
                out.append(entry)
                replaced = True
            else:
                out.append(existing)
        if not replaced:
            out.append(entry)
        return DependencySet(tuple(out))


def parse_dependencies(data: bytes) -> DependencySet:
    """Parse ``.bb/dependencies.txt``: one ``org/name commit url`` per line,
    ``#`` comment lines and blank lines ignored."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc}") from exc
    entries: list[DepEntry] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"line {lineno}: expected 'org/name commit url', got {raw!r}")
        slug, commit, url = fields
        parts = slug.split("/")
        if len(parts) != 2 or not all(is_identifier(p) for p in parts):
            raise ParseError(f"line {lineno}: bad brick slug {slug!r}")
        commit = commit.lower()
        if not is_full_commit(commit):
            raise UnpinnedEntryError(f"line {lineno}: commit {fields[1]!r} is not 40 hex chars")
        entries.append(DepEntry(ref=BrickRef(parts[0], parts[1], commit), url=url))
    return DependencySet(tuple(entries))


def serialize_dependencies(deps: DependencySet) -> bytes:
    lines = [DEPS_HEADER.rstrip("\n")]
    for entry in deps.entries:
        lines.append(f"{entry.ref.slug()} {entry.ref.commit} {entry.url}")
    return ("\n".join(lines) + "\n").encode("utf-8")
