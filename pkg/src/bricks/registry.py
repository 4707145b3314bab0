"""HTTP client for the brick registry, plus the deterministic archive format.

The wire protocol is plain HTTP/1.1 with bearer-token auth:

    GET  /api/{org}/{name}/commits                commit metadata, newest first
    GET  /api/{org}/{name}/{commit}/snapshot.tar  code/metadata tree, no payload
    GET  /api/{org}/{name}/{commit}/lock          the commit's brick.lock bytes
    GET  /blobs/{md5}                             one content-addressed blob
    PUT  /blobs/{md5}                             upload one blob
    POST /api/{org}/{name}/commits                ingest a snapshot archive

Snapshot archives are POSIX ustar with entries sorted by path and metadata
zeroed, so one commit always serializes to identical bytes. Blob and snapshot
responses carry an ``X-Content-MD5`` header and every transfer is re-hashed
before it can reach a cache, so a corrupted stream never contaminates stored
state.
"""

from __future__ import annotations

import hashlib
import io
import tarfile
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from typing import BinaryIO, Callable, Iterable, Sequence

import requests

from .errors import (
    AmbiguousPrefixError,
    AuthError,
    ConflictError,
    IntegrityError,
    MissingBlobError,
    NetworkError,
    NotFoundError,
    ParseError,
)
from .model import LATEST, BrickRef, ContentHash, Lockfile, is_full_commit
from .store import ContentStore

_CHUNK = 1 << 16

#: Top-level names never included in a snapshot archive: the data payload is
#: distributed as blobs, the rest is local machinery.
SNAPSHOT_EXCLUDES = frozenset({"brick", "logs", ".git", ".installed"})


@dataclass(frozen=True)
class RegistryEndpoint:
    """Where to talk and what to present: base URL plus opaque bearer token."""

    base_url: str
    token: str

    def __post_init__(self):
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))


@dataclass(frozen=True)
class CommitInfo:
    commit: str
    branch: str
    timestamp: int
    is_head_of_main: bool


# ---------------------------------------------------------------------------
# Deterministic snapshot archives


def snapshot_paths(src: Path, excludes: frozenset[str] = SNAPSHOT_EXCLUDES) -> list[str]:
    """Relative paths of every snapshot file, sorted bytewise."""
    src = Path(src)
    paths = []
    for path in src.rglob("*"):
        if not path.is_file() or path.is_symlink():
            continue
        rel = path.relative_to(src).as_posix()
        if rel.split("/", 1)[0] in excludes:
            continue
        paths.append(rel)
    paths.sort(key=lambda p: p.encode("utf-8"))
    return paths


def build_snapshot_archive(
    src: Path, excludes: frozenset[str] = SNAPSHOT_EXCLUDES
) -> bytes:
    """Pack a brick's code/metadata tree into canonical ustar bytes."""
    src = Path(src)
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for rel in snapshot_paths(src, excludes):
            info = tarfile.TarInfo(name=rel)
            full = src / rel
            info.size = full.stat().st_size
            info.mtime = 0
            info.mode = 0o644
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            with open(full, "rb") as fh:
                tar.addfile(info, fh)
    return buffer.getvalue()


def unpack_snapshot_archive(data: bytes, dest: Path) -> list[str]:
    """Unpack an archive, restricting members to plain relative files."""
    dest = Path(dest)
    names = []
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:") as tar:
        for member in tar.getmembers():
            if not member.isfile():
                raise IntegrityError(f"archive member {member.name!r} is not a file")
            parts = Path(member.name).parts
            if member.name.startswith("/") or ".." in parts:
                raise IntegrityError(f"archive member escapes destination: {member.name!r}")
            target = dest.joinpath(*parts)
            target.parent.mkdir(parents=True, exist_ok=True)
            source = tar.extractfile(member)
            assert source is not None
            with open(target, "wb") as fh:
                while True:
                    chunk = source.read(_CHUNK)
                    if not chunk:
                        break
                    fh.write(chunk)
            names.append(member.name)
    return names


def read_lockfile_from_archive(data: bytes) -> bytes:
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:") as tar:
        try:
            member = tar.getmember("brick.lock")
        except KeyError:
            raise ParseError("snapshot archive has no brick.lock") from None
        source = tar.extractfile(member)
        assert source is not None
        return source.read()


def payload_digests(lockfile: Lockfile, store: ContentStore) -> list[ContentHash]:
    """Every blob digest a commit's ``brick/`` outs require, in lock order:
    file digests, directory manifests, and the manifests' members.

    Directory members are enumerated through the local store, so the
    manifests must already be committed there.
    """
    digests: list[ContentHash] = []
    seen: set[str] = set()

    def add(digest: ContentHash):
        if str(digest) not in seen:
            seen.add(str(digest))
            digests.append(digest)

    for rec in lockfile.outs_under("brick"):
        if rec.hash.is_dir:
            if not store.has(rec.hash):
                raise MissingBlobError(
                    f"directory manifest {rec.hash} for {rec.path} not in local cache"
                )
            manifest = store.read_dir_manifest(rec.hash)
            for entry in manifest.entries:
                add(entry.hash)
            add(rec.hash)
        else:
            add(rec.hash)
    return digests


# ---------------------------------------------------------------------------
# Client


class RegistryClient:
    """Talks to one registry endpoint with retries and parallel blob fetch.

    Network errors and 5xx responses are retried up to three times with
    exponential backoff; 4xx responses map to typed errors immediately.
    Error text never includes the bearer token.
    """

    def __init__(
        self,
        endpoint: RegistryEndpoint,
        *,
        parallel: int = 4,
        retry_delays: Sequence[float] = (0.5, 1.0, 2.0),
        timeout: float = 30.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.parallel = max(1, parallel)
        self.retry_delays = tuple(retry_delays)
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    # -- transport ----------------------------------------------------------

    def _request(
        self,
        method: str,
        path: str,
        *,
        data: bytes | None = None,
        headers: dict[str, str] | None = None,
    ) -> requests.Response:
        url = self.endpoint.base_url + path
        all_headers = {"Authorization": f"Bearer {self.endpoint.token}"}
        if headers:
            all_headers.update(headers)
        attempts = len(self.retry_delays) + 1
        last_problem = "unknown"
        for attempt in range(attempts):
            try:
                resp = self.session.request(
                    method, url, data=data, headers=all_headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_problem = f"{type(exc).__name__} talking to {url}"
                resp = None
            if resp is not None and resp.status_code < 500:
                return resp
            if resp is not None:
                last_problem = f"server error {resp.status_code} from {url}"
            if attempt < attempts - 1:
                self._sleep(self.retry_delays[attempt])
        raise NetworkError(last_problem)

    def _check(self, resp: requests.Response, what: str) -> requests.Response:
        if resp.status_code in (200, 201):
            return resp
        if resp.status_code == 401:
            raise AuthError("registry rejected the configured token")
        if resp.status_code == 404:
            raise NotFoundError(f"{what} not found on registry")
        if resp.status_code == 409:
            raise ConflictError(f"{what}: {resp.text.strip()}")
        if resp.status_code == 400:
            raise IntegrityError(f"{what}: {resp.text.strip()}")
        raise NetworkError(f"unexpected status {resp.status_code} for {what}")

    @staticmethod
    def _verified_body(resp: requests.Response, what: str) -> bytes:
        body = resp.content
        header = resp.headers.get("X-Content-MD5")
        if header and hashlib.md5(body).hexdigest() != header:
            raise IntegrityError(f"{what}: body does not match X-Content-MD5 header")
        return body

    # -- commit metadata ------------------------------------------------------

    def list_commits(self, org: str, name: str) -> list[CommitInfo]:
        resp = self._check(
            self._request("GET", f"/api/{org}/{name}/commits"), f"brick {org}/{name}"
        )
        return [
            CommitInfo(
                commit=item["commit"],
                branch=item["branch"],
                timestamp=item["timestamp"],
                is_head_of_main=item["is_head_of_main"],
            )
            for item in resp.json()
        ]

    def resolve_commit(self, ref: BrickRef) -> str:
        """Resolve ``latest`` or a unique prefix to a full 40-hex commit."""
        if is_full_commit(ref.commit):
            return ref.commit
        commits = self.list_commits(ref.org, ref.name)
        if ref.commit == LATEST:
            for info in commits:
                if info.is_head_of_main:
                    return info.commit
            raise NotFoundError(f"{ref.slug()} has no main-branch head")
        matches = [c.commit for c in commits if c.commit.startswith(ref.commit)]
        if not matches:
            raise NotFoundError(f"no commit of {ref.slug()} starts with {ref.commit!r}")
        if len(matches) > 1:
            raise AmbiguousPrefixError(
                f"prefix {ref.commit!r} matches {len(matches)} commits of {ref.slug()}"
            )
        return matches[0]

    # -- content transfer -----------------------------------------------------

    def fetch_snapshot(self, org: str, name: str, commit: str, dest: Path) -> int:
        """Download and unpack one commit's snapshot; returns archive size."""
        what = f"snapshot {org}/{name}@{commit}"
        resp = self._check(
            self._request("GET", f"/api/{org}/{name}/{commit}/snapshot.tar"), what
        )
        body = self._verified_body(resp, what)
        unpack_snapshot_archive(body, dest)
        return len(body)

    def fetch_lock(self, org: str, name: str, commit: str) -> bytes:
        what = f"lock {org}/{name}@{commit}"
        resp = self._check(
            self._request("GET", f"/api/{org}/{name}/{commit}/lock"), what
        )
        return self._verified_body(resp, what)

    def fetch_blob(self, digest: ContentHash | str, sink: BinaryIO) -> int:
        """Stream one blob into ``sink`` after its MD5 verified; on any
        integrity failure nothing is written to the sink."""
        text = digest.digest if isinstance(digest, ContentHash) else digest
        resp = self._check(self._request("GET", f"/blobs/{text}"), f"blob {text}")
        with tempfile.SpooledTemporaryFile(max_size=8 * 1024 * 1024) as spool:
            md5 = hashlib.md5()
            size = 0
            for chunk in resp.iter_content(_CHUNK):
                md5.update(chunk)
                size += len(chunk)
                spool.write(chunk)
            if md5.hexdigest() != text:
                raise IntegrityError(
                    f"blob {text} arrived with digest {md5.hexdigest()}"
                )
            spool.seek(0)
            while True:
                chunk = spool.read(_CHUNK)
                if not chunk:
                    break
                sink.write(chunk)
        return size

    def fetch_blob_to_store(self, store: ContentStore, digest: ContentHash | str) -> int:
        with tempfile.SpooledTemporaryFile(max_size=8 * 1024 * 1024) as spool:
            size = self.fetch_blob(digest, spool)
            spool.seek(0)
            store.put_blob(spool)
        return size

    def fetch_blobs(
        self, store: ContentStore, digests: Iterable[ContentHash | str]
    ) -> int:
        """Fetch every digest absent from the store, in parallel; returns the
        number fetched. Retrying after a partial failure converges on the
        same final state because present blobs are skipped."""
        wanted = []
        seen: set[str] = set()
        for digest in digests:
            text = digest.digest if isinstance(digest, ContentHash) else digest
            if text not in seen:
                seen.add(text)
                if not store.has(text):
                    wanted.append(text)
        if not wanted:
            return 0
        if len(wanted) == 1 or self.parallel == 1:
            for text in wanted:
                self.fetch_blob_to_store(store, text)
            return len(wanted)
        with ThreadPoolExecutor(max_workers=min(self.parallel, len(wanted))) as pool:
            list(pool.map(lambda t: self.fetch_blob_to_store(store, t), wanted))
        return len(wanted)

    def put_blob(self, store: ContentStore, digest: ContentHash | str) -> None:
        text = digest.digest if isinstance(digest, ContentHash) else digest
        body = store.read_blob(text)
        self._check(
            self._request("PUT", f"/blobs/{text}", data=body), f"blob {text}"
        )

    # -- publishing -----------------------------------------------------------

    def push_brick(
        self,
        snapshot_dir: Path,
        lockfile: Lockfile,
        store: ContentStore,
        *,
        org: str,
        name: str,
        commit_id: str | None = None,
        branch: str = "main",
    ) -> str:
        """Publish one brick: upload every payload blob the lock references,
        then register the snapshot archive as a new commit. Blobs go first so
        a registered commit is always fully servable. Returns the commit id
        the registry assigned (SHA-1 of the archive unless overridden)."""
        archive = build_snapshot_archive(snapshot_dir)
        for digest in payload_digests(lockfile, store):
            self.put_blob(store, digest)
        headers = {"X-Branch": branch}
        if commit_id is not None:
            headers["X-Commit-Id"] = commit_id
        resp = self._check(
            self._request(
                "POST", f"/api/{org}/{name}/commits", data=archive, headers=headers
            ),
            f"push {org}/{name}",
        )
        return resp.json()["commit"]
