"""Minimal self-hostable brick registry.

Serves the wire protocol the client speaks (see ``registry``): commit
metadata, deterministic snapshot archives, and content-addressed blobs, all
behind static bearer tokens. Storage mirrors the client cache: every blob
(including snapshot archives and lockfiles) lives once in a content-addressed
store, and a small JSON index maps bricks to their commit history.

Run standalone with ``python -m bricks.server --root DIR --token TOKEN``.
"""

from __future__ import annotations

import argparse
import hashlib
import hmac
import json
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import ConflictError, ParseError
from .model import is_full_commit, parse_lockfile
from .registry import read_lockfile_from_archive
from .store import ContentStore

_IDENT = r"[A-Za-z0-9._-]+"
_COMMITS_RE = re.compile(rf"^/api/({_IDENT})/({_IDENT})/commits$")
_SNAPSHOT_RE = re.compile(rf"^/api/({_IDENT})/({_IDENT})/([0-9a-f]{{40}})/snapshot\.tar$")
_LOCK_RE = re.compile(rf"^/api/({_IDENT})/({_IDENT})/([0-9a-f]{{40}})/lock$")
_BLOB_RE = re.compile(r"^/blobs/([0-9a-f]{32})$")


@dataclass
class CommitRecord:
    commit: str
    branch: str
    timestamp: int
    archive_md5: str
    lock_md5: str

    def to_json(self) -> dict:
        return {
            "commit": self.commit,
            "branch": self.branch,
            "timestamp": self.timestamp,
            "archive_md5": self.archive_md5,
            "lock_md5": self.lock_md5,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CommitRecord":
        return cls(**data)


@dataclass
class RequestRecord:
    method: str
    path: str
    status: int
    size: int = 0


@dataclass
class RegistryState:
    """Commit index plus blob store, with a JSON file for persistence."""

    root: Path
    commits: dict[str, list[CommitRecord]] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.store = ContentStore(self.root / "blobs")
        self.store.ensure()
        self._index_path = self.root / "index.json"
        self._lock = threading.Lock()
        if self._index_path.is_file():
            raw = json.loads(self._index_path.read_text())
            self.commits = {
                slug: [CommitRecord.from_json(r) for r in records]
                for slug, records in raw.items()
            }

    def _persist(self) -> None:
        payload = json.dumps(
            {slug: [r.to_json() for r in records] for slug, records in self.commits.items()},
            indent=2,
        )
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".index-")
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, self._index_path)

    def find(self, slug: str, commit: str) -> CommitRecord | None:
        for record in self.commits.get(slug, []):
            if record.commit == commit:
                return record
        return None

    def ingest(
        self,
        org: str,
        name: str,
        archive: bytes,
        *,
        commit_id: str | None = None,
        branch: str = "main",
        timestamp: int | None = None,
    ) -> str:
        """Register one commit, storing its archive, lockfile, and nothing
        else; blobs must already have been uploaded. Re-ingest of identical
        bytes is a no-op; the same id with different bytes conflicts."""
        lock_bytes = read_lockfile_from_archive(archive)
        lockfile = parse_lockfile(lock_bytes)
        missing = []
        for rec in lockfile.outs_under("brick"):
            if not self.store.has(rec.hash.digest):
                missing.append(str(rec.hash))
                continue
            if rec.hash.is_dir:
                manifest = self.store.read_dir_manifest(rec.hash)
                missing.extend(
                    str(e.hash) for e in manifest.entries if not self.store.has(e.hash)
                )
        if missing:
            raise ParseError(f"missing blobs for commit: {sorted(set(missing))}")

        if commit_id is None:
            commit_id = hashlib.sha1(archive).hexdigest()
        elif not is_full_commit(commit_id):
            raise ParseError(f"explicit commit id {commit_id!r} is not 40 hex chars")
        archive_md5 = hashlib.md5(archive).hexdigest()
        slug = f"{org}/{name}"
        with self._lock:
            existing = self.find(slug, commit_id)
            if existing is not None:
                if existing.archive_md5 != archive_md5:
                    raise ConflictError(
                        f"commit {commit_id} already exists with different content"
                    )
                return commit_id
            self.store.put_blob(archive)
            self.store.put_blob(lock_bytes)
            record = CommitRecord(
                commit=commit_id,
                branch=branch,
                timestamp=int(time.time()) if timestamp is None else timestamp,
                archive_md5=archive_md5,
                lock_md5=hashlib.md5(lock_bytes).hexdigest(),
            )
            self.commits.setdefault(slug, []).append(record)
            self._persist()
        return commit_id

    def commit_listing(self, slug: str) -> list[dict] | None:
        with self._lock:
            records = self.commits.get(slug)
            if records is None:
                return None
            head = None
            for record in records:
                if record.branch == "main":
                    head = record.commit
            return [
                {
                    "commit": r.commit,
                    "branch": r.branch,
                    "timestamp": r.timestamp,
                    "is_head_of_main": r.commit == head,
                }
                for r in reversed(records)
            ]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "BrickRegistry/0.1"

    @property
    def registry(self) -> "RegistryServer":
        return self.server.registry  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # request log is kept internally
        pass

    # -- plumbing -----------------------------------------------------------

    def _send(self, status: int, body: bytes, content_type: str, extra=None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for key, value in (extra or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)
        self.registry.record(self.command, self.path, status, len(body))

    def _send_json(self, status: int, payload: object, extra=None) -> None:
        self._send(status, json.dumps(payload).encode(), "application/json", extra)

    def _send_error(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _authorized(self) -> bool:
        header = self.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            return False
        presented = header[len("Bearer ") :].strip()
        return any(
            hmac.compare_digest(presented, token) for token in self.registry.tokens
        )

    def _gate(self) -> bool:
        if self._authorized():
            return True
        self._send_error(401, "missing or invalid bearer token")
        return False

    def _read_body(self) -> bytes | None:
        length = self.headers.get("Content-Length")
        if length is None:
            self._send_error(411, "Content-Length required")
            return None
        return self.rfile.read(int(length))

    # -- handlers -------------------------------------------------------------

    def do_GET(self):
        if not self._gate():
            return
        state = self.registry.state

        match = _COMMITS_RE.match(self.path)
        if match:
            listing = state.commit_listing(f"{match.group(1)}/{match.group(2)}")
            if listing is None:
                self._send_error(404, "unknown brick")
            else:
                self._send_json(200, listing)
            return

        match = _SNAPSHOT_RE.match(self.path)
        if match:
            record = state.find(f"{match.group(1)}/{match.group(2)}", match.group(3))
            if record is None:
                self._send_error(404, "unknown commit")
                return
            body = state.store.read_blob(record.archive_md5)
            self._send(
                200, body, "application/x-tar", {"X-Content-MD5": record.archive_md5}
            )
            return

        match = _LOCK_RE.match(self.path)
        if match:
            record = state.find(f"{match.group(1)}/{match.group(2)}", match.group(3))
            if record is None:
                self._send_error(404, "unknown commit")
                return
            body = state.store.read_blob(record.lock_md5)
            self._send(200, body, "text/yaml", {"X-Content-MD5": record.lock_md5})
            return

        match = _BLOB_RE.match(self.path)
        if match:
            digest = match.group(1)
            if not state.store.has(digest):
                self._send_error(404, "unknown blob")
                return
            body = state.store.read_blob(digest)
            self._send(
                200, body, "application/octet-stream", {"X-Content-MD5": digest}
            )
            return

        self._send_error(404, "no such endpoint")

    def do_PUT(self):
        if not self._gate():
            return
        match = _BLOB_RE.match(self.path)
        if not match:
            self._send_error(404, "no such endpoint")
            return
        body = self._read_body()
        if body is None:
            return
        digest = match.group(1)
        actual = hashlib.md5(body).hexdigest()
        if actual != digest:
            self._send_error(400, f"body hashes to {actual}, path names {digest}")
            return
        self.registry.state.store.put_blob(body)
        self._send_json(201, {"stored": digest})

    def do_POST(self):
        if not self._gate():
            return
        match = _COMMITS_RE.match(self.path)
        if not match:
            self._send_error(404, "no such endpoint")
            return
        body = self._read_body()
        if body is None:
            return
        try:
            commit = self.registry.state.ingest(
                match.group(1),
                match.group(2),
                body,
                commit_id=self.headers.get("X-Commit-Id"),
                branch=self.headers.get("X-Branch", "main"),
            )
        except ConflictError as exc:
            self._send_error(409, str(exc))
            return
        except ParseError as exc:
            self._send_error(400, str(exc))
            return
        except Exception as exc:  # malformed tar and friends
            self._send_error(400, f"bad archive: {type(exc).__name__}")
            return
        self._send_json(201, {"commit": commit})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class RegistryServer:
    """Embeddable registry: start() serves on a background thread."""

    def __init__(
        self,
        root: Path,
        tokens: set[str] | str,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.state = RegistryState(Path(root))
        self.tokens = {tokens} if isinstance(tokens, str) else set(tokens)
        self._httpd = _Server((host, port), _Handler)
        self._httpd.registry = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None
        self.requests: list[RequestRecord] = []
        self._log_lock = threading.Lock()

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def record(self, method: str, path: str, status: int, size: int) -> None:
        with self._log_lock:
            self.requests.append(RequestRecord(method, path, status, size))

    def requests_matching(self, method: str, pattern: str) -> list[RequestRecord]:
        regex = re.compile(pattern)
        with self._log_lock:
            return [
                r for r in self.requests if r.method == method and regex.match(r.path)
            ]

    def clear_request_log(self) -> None:
        with self._log_lock:
            self.requests.clear()

    def start(self) -> "RegistryServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bricks-registry", description="Serve a brick registry over HTTP."
    )
    parser.add_argument("--root", required=True, help="storage directory")
    parser.add_argument(
        "--token", action="append", required=True, help="accepted bearer token (repeatable)"
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    args = parser.parse_args(argv)

    server = RegistryServer(
        Path(args.root), set(args.token), host=args.host, port=args.port
    ).start()
    print(f"registry listening on {server.base_url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
