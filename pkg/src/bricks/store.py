"""Content-addressed blob cache under ``{library}/cache``.

Each distinct byte sequence is stored once, keyed by its MD5, at
``root/<first 2 hex>/<remaining 30 hex>``. Directory contents are reduced to
a canonical, sorted manifest whose own MD5 (rendered with a ``.dir`` suffix)
stands for the directory. Writes are crash-safe: blobs stream to a temp file
in the cache root and are renamed onto their digest path, so concurrent
writers and readers never observe partial blobs.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import stat
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

from .errors import (
    BadHashError,
    CorruptCacheError,
    MissingBlobError,
    ParseError,
)
from .model import ContentHash

_CHUNK = 1 << 20
_TMP_PREFIX = ".tmp-"


def hash_bytes(data: bytes) -> ContentHash:
    """MD5 of raw bytes (lowercase hex, ``is_dir`` false)."""
    return ContentHash(hashlib.md5(data).hexdigest())


def _hash_stream(source: BinaryIO, sink: BinaryIO | None = None) -> tuple[str, int]:
    md5 = hashlib.md5()
    size = 0
    while True:
        chunk = source.read(_CHUNK)
        if not chunk:
            break
        md5.update(chunk)
        size += len(chunk)
        if sink is not None:
            sink.write(chunk)
    return md5.hexdigest(), size


def hash_file(path: Path) -> tuple[ContentHash, int]:
    """MD5 and size of one file, read in chunks."""
    with open(path, "rb") as fh:
        digest, size = _hash_stream(fh)
    return ContentHash(digest), size


# ---------------------------------------------------------------------------
# Directory manifests


@dataclass(frozen=True)
class DirEntry:
    relpath: str
    hash: ContentHash
    size: int


@dataclass(frozen=True)
class DirManifest:
    """Canonical listing of every regular file under a directory.

    Entries are sorted bytewise by relpath; the serialization is one line per
    entry, ``<md5> <size> <relpath>``, newline-terminated, UTF-8. Equal trees
    therefore always serialize identically regardless of creation order.
    """

    entries: tuple[DirEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        relpaths = [e.relpath for e in self.entries]
        if sorted(relpaths, key=lambda r: r.encode("utf-8")) != relpaths:
            raise ParseError("directory manifest entries are not sorted")
        if len(set(relpaths)) != len(relpaths):
            raise ParseError("directory manifest has duplicate relpaths")
        for entry in self.entries:
            if entry.hash.is_dir:
                raise ParseError(f"nested dir digest for {entry.relpath!r}")
            parts = entry.relpath.split("/")
            if entry.relpath.startswith("/") or any(p in ("", ".", "..") for p in parts):
                raise ParseError(f"bad manifest relpath {entry.relpath!r}")

    def canonical_bytes(self) -> bytes:
        lines = [f"{e.hash.digest} {e.size} {e.relpath}\n" for e in self.entries]
        return "".join(lines).encode("utf-8")

    def digest(self) -> ContentHash:
        return ContentHash(hashlib.md5(self.canonical_bytes()).hexdigest(), is_dir=True)

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries)

    @classmethod
    def parse(cls, data: bytes) -> "DirManifest":
        entries = []
        for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
            fields = line.split(" ", 2)
            if len(fields) != 3:
                raise ParseError(f"manifest line {lineno}: expected 'md5 size relpath'")
            digest, size_text, relpath = fields
            try:
                size = int(size_text)
            except ValueError as exc:
                raise ParseError(f"manifest line {lineno}: bad size {size_text!r}") from exc
            if size < 0:
                raise ParseError(f"manifest line {lineno}: negative size")
            entries.append(DirEntry(relpath=relpath, hash=ContentHash(digest), size=size))
        return cls(tuple(entries))


def hash_tree(directory: Path) -> tuple[DirManifest, ContentHash]:
    """Manifest and digest of every regular file under ``directory``.

    The digest is the MD5 of the manifest's canonical serialization with
    ``is_dir`` set, so permuting file creation order never changes it.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"not a directory: {directory}")
    entries = []
    for root, dirs, files in os.walk(directory):
        dirs.sort()
        for fname in files:
            path = Path(root) / fname
            relpath = path.relative_to(directory).as_posix()
            digest, size = hash_file(path)
            entries.append(DirEntry(relpath=relpath, hash=digest, size=size))
    entries.sort(key=lambda e: e.relpath.encode("utf-8"))
    manifest = DirManifest(tuple(entries))
    return manifest, manifest.digest()


# ---------------------------------------------------------------------------
# The cache


@dataclass(frozen=True)
class CacheLayout:
    """Pure path arithmetic for the sharded cache directory."""

    root: Path

    def blob_path(self, digest: str | ContentHash) -> Path:
        text = digest.digest if isinstance(digest, ContentHash) else digest
        if len(text) != 32:
            raise BadHashError(f"bad digest {text!r}")
        return self.root / text[:2] / text[2:]


@dataclass
class StoreStats:
    """Observed write activity, for dedup assertions."""

    puts: int = 0
    blobs_written: int = 0
    bytes_written: int = 0


@dataclass
class VerifyReport:
    checked: int = 0
    corrupt: list[tuple[str, str]] = field(default_factory=list)  # (path, problem)

    @property
    def ok(self) -> bool:
        return not self.corrupt


class ContentStore:
    """Blob store over a CacheLayout: put, materialize, verify, enumerate."""

    def __init__(self, root: Path | CacheLayout):
        self.layout = root if isinstance(root, CacheLayout) else CacheLayout(Path(root))
        self.stats = StoreStats()

    @property
    def root(self) -> Path:
        return self.layout.root

    def ensure(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)

    def has(self, digest: str | ContentHash) -> bool:
        return self.layout.blob_path(digest).is_file()

    def open_blob(self, digest: str | ContentHash) -> BinaryIO:
        path = self.layout.blob_path(digest)
        if not path.is_file():
            raise MissingBlobError(f"blob {digest} not in cache")
        return open(path, "rb")

    def read_blob(self, digest: str | ContentHash) -> bytes:
        with self.open_blob(digest) as fh:
            return fh.read()

    def blob_size(self, digest: str | ContentHash) -> int:
        path = self.layout.blob_path(digest)
        if not path.is_file():
            raise MissingBlobError(f"blob {digest} not in cache")
        return path.stat().st_size

    def _verify_existing(self, path: Path, digest: str) -> None:
        actual, _ = hash_file(path)
        if actual.digest != digest:
            raise CorruptCacheError(
                f"cache file {path} hashes to {actual.digest}, expected {digest}"
            )

    def _commit_temp(self, tmp: Path, digest: str, size: int) -> None:
        target = self.layout.blob_path(digest)
        if target.exists():
            # Identical content already present: byte-level dedup, zero writes.
            self._verify_existing(target, digest)
            tmp.unlink()
            return
        os.chmod(tmp, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
        target.parent.mkdir(parents=True, exist_ok=True)
        os.replace(tmp, target)
        self.stats.blobs_written += 1
        self.stats.bytes_written += size

    def put_blob(self, data: bytes | BinaryIO) -> ContentHash:
        """Store one blob, deduplicating on content; returns its digest.

        Existing blobs are re-verified against their path digest and a
        mismatch raises CorruptCacheError rather than silently trusting the
        cache.
        """
        self.stats.puts += 1
        if isinstance(data, bytes):
            digest = hashlib.md5(data).hexdigest()
            target = self.layout.blob_path(digest)
            if target.exists():
                self._verify_existing(target, digest)
                return ContentHash(digest)
            fd, tmp_name = tempfile.mkstemp(prefix=_TMP_PREFIX, dir=self.root)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                self._commit_temp(Path(tmp_name), digest, len(data))
            except BaseException:
                if os.path.exists(tmp_name):
                    os.unlink(tmp_name)
                raise
            return ContentHash(digest)

        fd, tmp_name = tempfile.mkstemp(prefix=_TMP_PREFIX, dir=self.root)
        try:
            with os.fdopen(fd, "wb") as fh:
                digest, size = _hash_stream(data, fh)
                fh.flush()
                os.fsync(fh.fileno())
            self._commit_temp(Path(tmp_name), digest, size)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        return ContentHash(digest)

    def put_file(self, path: Path) -> ContentHash:
        with open(path, "rb") as fh:
            return self.put_blob(fh)

    def put_tree(self, directory: Path) -> tuple[DirManifest, ContentHash]:
        """Store every file under ``directory`` plus its manifest blob."""
        manifest, digest = hash_tree(directory)
        for entry in manifest.entries:
            self.put_file(Path(directory) / entry.relpath)
        self.put_blob(manifest.canonical_bytes())
        return manifest, digest

    def read_dir_manifest(self, digest: ContentHash) -> DirManifest:
        if not digest.is_dir:
            raise BadHashError(f"{digest} is not a directory digest")
        return DirManifest.parse(self.read_blob(digest))

    # -- materialization ----------------------------------------------------

    def _link_file(self, digest: ContentHash, dest: Path) -> bool:
        """Link ``dest`` to the cached blob; returns True if it fell back to
        a copy because the filesystem refused symlinks."""
        src = self.layout.blob_path(digest)
        if not src.is_file():
            raise MissingBlobError(f"blob {digest} not in cache")
        if dest.is_symlink():
            if os.readlink(dest) == str(src):
                return False
            raise OSError(f"{dest} already links elsewhere")
        if dest.exists():
            actual, _ = hash_file(dest)
            if actual.digest == digest.digest:
                return False  # earlier copy-fallback; already correct
            raise OSError(f"{dest} exists with different content")
        dest.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.symlink(src, dest)
            return False
        except (OSError, NotImplementedError):
            shutil.copyfile(src, dest)
            return True

    def materialize(self, digest: ContentHash, dest: Path) -> list[str]:
        """Make ``dest`` expose the blob's bytes via links into the cache.

        For a directory digest, ``dest`` becomes a directory of per-file
        links mirroring the manifest. Returns the relpaths that had to be
        copied instead of linked (normally empty); re-running against an
        already-correct destination changes nothing.
        """
        dest = Path(dest)
        copied: list[str] = []
        if digest.is_dir:
            manifest = self.read_dir_manifest(digest)
            dest.mkdir(parents=True, exist_ok=True)
            for entry in manifest.entries:
                if self._link_file(entry.hash, dest / entry.relpath):
                    copied.append(entry.relpath)
        else:
            if self._link_file(digest, dest):
                copied.append(dest.name)
        return copied

    # -- maintenance --------------------------------------------------------

    def iter_digests(self) -> Iterable[str]:
        """Digests of every committed blob currently in the cache."""
        if not self.root.is_dir():
            return
        for shard in sorted(p for p in self.root.iterdir() if p.is_dir()):
            if len(shard.name) != 2:
                continue
            for blob in sorted(shard.iterdir()):
                yield shard.name + blob.name

    def verify(self) -> VerifyReport:
        """Re-hash every cached blob against the digest encoded in its path.

        In-flight temp files are ignored; anything else that does not look
        like a committed blob is reported.
        """
        report = VerifyReport()
        if not self.root.is_dir():
            return report
        hex2 = set("0123456789abcdef")
        for item in sorted(self.root.iterdir()):
            if item.name.startswith(_TMP_PREFIX):
                continue
            if not (item.is_dir() and len(item.name) == 2 and set(item.name) <= hex2):
                report.corrupt.append((str(item), "unexpected cache entry"))
                continue
            for blob in sorted(item.iterdir()):
                digest = item.name + blob.name
                report.checked += 1
                if len(digest) != 32 or not set(digest) <= set("0123456789abcdef"):
                    report.corrupt.append((str(blob), "name is not a digest"))
                    continue
                actual, _ = hash_file(blob)
                if actual.digest != digest:
                    report.corrupt.append(
                        (str(blob), f"content hashes to {actual.digest}")
                    )
        return report

    def unreferenced(self, referenced: set[str]) -> list[str]:
        """Digests present in the cache but absent from ``referenced``."""
        return [d for d in self.iter_digests() if d not in referenced]
