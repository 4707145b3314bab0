from __future__ import annotations

import hashlib
import io
import json
import os
import tarfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import requests

from bricks.errors import (
    AmbiguousPrefixError,
    AuthError,
    ConflictError,
    IntegrityError,
    NetworkError,
    NotFoundError,
)
from bricks.model import BrickRef
from bricks.registry import (
    RegistryClient,
    RegistryEndpoint,
    build_snapshot_archive,
    unpack_snapshot_archive,
)
from bricks.store import ContentStore, hash_bytes

from conftest import TEST_TOKEN
from forge import forge_brick, publish_brick

MD5_HELLO = "5d41402abc4b2a76b9719d911017c592"


def _commit_id(prefix: str) -> str:
    return (prefix + "0" * 40)[:40]


@pytest.fixture
def seeded(tmp_path, registry_server, client, dev_store):
    """Three commits of one brick, with controlled ids for prefix tests."""
    commits = []
    for i, prefix in enumerate(("4f060a", "4f060b", "9e1f2c")):
        brick = forge_brick(
            tmp_path / f"src{i}",
            {"table.parquet": f"payload {i}".encode()},
            extra_files={"scripts/build.py": f"# build {i}\n"},
        )
        commits.append(
            publish_brick(
                client,
                dev_store,
                brick,
                org="biobricks-ai",
                name="chemharmony",
                commit_id=_commit_id(prefix),
            )
        )
    return commits


# ---------------------------------------------------------------------------
# Deterministic archives


def test_archive_deterministic(tmp_path):
    src = tmp_path / "src"
    (src / "scripts").mkdir(parents=True)
    (src / "scripts" / "b.py").write_text("b")
    (src / "a.txt").write_text("a")
    (src / "brick").mkdir()
    (src / "brick" / "data.bin").write_text("payload")  # excluded
    one = build_snapshot_archive(src)
    os.utime(src / "a.txt", (1234567890, 1234567890))
    two = build_snapshot_archive(src)
    assert one == two

    with tarfile.open(fileobj=io.BytesIO(one)) as tar:
        names = tar.getnames()
        assert names == sorted(names)
        assert "brick/data.bin" not in names
        assert all(m.mtime == 0 for m in tar.getmembers())

    dest = tmp_path / "restored"
    unpack_snapshot_archive(one, dest)
    assert (dest / "a.txt").read_text() == "a"
    assert (dest / "scripts" / "b.py").read_text() == "b"


def test_unpack_rejects_escaping_members(tmp_path):
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        info = tarfile.TarInfo(name="../evil.txt")
        info.size = 4
        tar.addfile(info, io.BytesIO(b"evil"))
    with pytest.raises(IntegrityError):
        unpack_snapshot_archive(buffer.getvalue(), tmp_path / "out")


# ---------------------------------------------------------------------------
# Commit metadata


def test_list_commits_newest_first(client, seeded):
    infos = client.list_commits("biobricks-ai", "chemharmony")
    assert [i.commit for i in infos] == list(reversed(seeded))
    assert infos[0].is_head_of_main
    assert sum(i.is_head_of_main for i in infos) == 1
    assert all(i.branch == "main" for i in infos)


def test_list_commits_unknown_brick(client, seeded):
    with pytest.raises(NotFoundError):
        client.list_commits("biobricks-ai", "nosuch")


def test_resolve_latest_and_prefixes(client, seeded):
    ref = BrickRef("biobricks-ai", "chemharmony")
    assert client.resolve_commit(ref) == seeded[-1]
    assert client.resolve_commit(ref.with_commit("9e1f2")) == seeded[2]
    with pytest.raises(AmbiguousPrefixError):
        client.resolve_commit(ref.with_commit("4f060"))
    with pytest.raises(NotFoundError):
        client.resolve_commit(ref.with_commit("fffff"))
    assert client.resolve_commit(ref.with_commit(seeded[0])) == seeded[0]


# ---------------------------------------------------------------------------
# Auth


def test_every_endpoint_requires_token(registry_server, seeded):
    bad = RegistryClient(
        RegistryEndpoint(registry_server.base_url, "wrong-token"),
        retry_delays=(),
    )
    commit = seeded[0]
    sink = io.BytesIO()
    with pytest.raises(AuthError):
        bad.list_commits("biobricks-ai", "chemharmony")
    with pytest.raises(AuthError):
        bad.fetch_snapshot("biobricks-ai", "chemharmony", commit, io.BytesIO())  # type: ignore[arg-type]
    with pytest.raises(AuthError):
        bad.fetch_lock("biobricks-ai", "chemharmony", commit)
    with pytest.raises(AuthError):
        bad.fetch_blob(MD5_HELLO, sink)
    resp = requests.put(
        f"{registry_server.base_url}/blobs/{MD5_HELLO}",
        data=b"hello",
        headers={"Authorization": "Bearer nope"},
        timeout=5,
    )
    assert resp.status_code == 401
    resp = requests.post(
        f"{registry_server.base_url}/api/a/b/commits", data=b"x", timeout=5
    )
    assert resp.status_code == 401


def test_auth_error_never_leaks_token(client, registry_server):
    bad = RegistryClient(
        RegistryEndpoint(registry_server.base_url, "secret-token-value"),
        retry_delays=(),
    )
    with pytest.raises(AuthError) as err:
        bad.list_commits("a", "b")
    assert "secret-token-value" not in str(err.value)


# ---------------------------------------------------------------------------
# Blob transfer


def test_blob_round_trip(client, dev_store, registry_server):
    digest = dev_store.put_blob(b"hello")
    client.put_blob(dev_store, digest)
    sink = io.BytesIO()
    size = client.fetch_blob(digest, sink)
    assert size == 5
    assert sink.getvalue() == b"hello"


def test_fetch_unknown_blob(client):
    with pytest.raises(NotFoundError):
        client.fetch_blob(MD5_HELLO, io.BytesIO())


def test_put_blob_digest_mismatch_rejected(registry_server):
    resp = requests.put(
        f"{registry_server.base_url}/blobs/{MD5_HELLO}",
        data=b"not hello",
        headers={"Authorization": f"Bearer {TEST_TOKEN}"},
        timeout=5,
    )
    assert resp.status_code == 400


def test_snapshot_fetch_and_refetch_identical(client, seeded, tmp_path, registry_server):
    one = tmp_path / "one"
    two = tmp_path / "two"
    client.fetch_snapshot("biobricks-ai", "chemharmony", seeded[0], one)
    client.fetch_snapshot("biobricks-ai", "chemharmony", seeded[0], two)
    assert (one / "brick.yaml").read_bytes() == (two / "brick.yaml").read_bytes()
    assert (one / "brick.lock").is_file()
    assert (one / "scripts" / "build.py").is_file()
    sizes = {
        r.size
        for r in registry_server.requests_matching("GET", r".*/snapshot\.tar$")
    }
    assert len(sizes) == 1  # byte-identical archive both times


def test_fetch_lock_matches_snapshot(client, seeded, tmp_path):
    lock_bytes = client.fetch_lock("biobricks-ai", "chemharmony", seeded[1])
    dest = tmp_path / "snap"
    client.fetch_snapshot("biobricks-ai", "chemharmony", seeded[1], dest)
    assert lock_bytes == (dest / "brick.lock").read_bytes()


# ---------------------------------------------------------------------------
# Push semantics


def test_push_idempotent(client, dev_store, tmp_path, registry_server):
    brick = forge_brick(tmp_path / "p1", {"a.parquet": b"alpha"})
    first = publish_brick(client, dev_store, brick, org="o", name="n")
    before = len(registry_server.state.commits["o/n"])
    second = publish_brick(client, dev_store, brick, org="o", name="n")
    assert first == second
    assert len(registry_server.state.commits["o/n"]) == before


def test_push_conflicting_commit_id(client, dev_store, tmp_path):
    one = forge_brick(tmp_path / "c1", {"a.parquet": b"one"})
    two = forge_brick(tmp_path / "c2", {"a.parquet": b"two"})
    commit = _commit_id("dead")
    publish_brick(client, dev_store, one, org="o", name="n", commit_id=commit)
    with pytest.raises(ConflictError):
        publish_brick(client, dev_store, two, org="o", name="n", commit_id=commit)


def test_push_requires_blobs_before_commit(client, tmp_path, registry_server):
    brick = forge_brick(tmp_path / "nb", {"a.parquet": b"data"})
    archive = build_snapshot_archive(brick.workdir)
    resp = requests.post(
        f"{registry_server.base_url}/api/o/n/commits",
        data=archive,
        headers={"Authorization": f"Bearer {TEST_TOKEN}"},
        timeout=5,
    )
    assert resp.status_code == 400
    assert "missing blobs" in resp.json()["error"]


def test_server_storage_dedups_shared_blobs(client, dev_store, tmp_path, registry_server):
    shared = {"common.parquet": b"shared bytes"}
    one = forge_brick(tmp_path / "s1", {**shared, "only1.parquet": b"one"})
    two = forge_brick(tmp_path / "s2", {**shared, "only2.parquet": b"two"})
    publish_brick(client, dev_store, one, org="o", name="b1")
    publish_brick(client, dev_store, two, org="o", name="b2")
    server_digests = set(registry_server.state.store.iter_digests())
    assert hash_bytes(b"shared bytes").digest in server_digests
    # 3 payload blobs + 2 archives + 2 lockfiles
    assert len(server_digests) == 7


# ---------------------------------------------------------------------------
# Corruption and retries


def test_endpoint_url_normalized():
    ep = RegistryEndpoint("http://reg.example:8080/", "t")
    assert ep.base_url == "http://reg.example:8080"


class _RogueHandler(BaseHTTPRequestHandler):
    """Serves corrupted or truncated bodies to provoke integrity failures."""

    mode = "tamper"

    def log_message(self, fmt, *args):
        pass

    def do_GET(self):
        payload = b"hello"
        if self.mode == "tamper":
            body = b"jello"
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        elif self.mode == "bad-header":
            body = b"whatever bytes"
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("X-Content-MD5", MD5_HELLO)  # does not match body
            self.end_headers()
            self.wfile.write(body)
        else:  # truncate: close-delimited prefix of the real bytes
            self.send_response(200)
            self.end_headers()
            self.wfile.write(payload[:2])
            self.wfile.flush()
            self.connection.close()


@pytest.fixture
def rogue_server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _RogueHandler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield httpd
    httpd.shutdown()
    httpd.server_close()


@pytest.mark.parametrize("mode", ["tamper", "truncate"])
def test_corrupt_transfer_discards_bytes(rogue_server, mode):
    _RogueHandler.mode = mode
    host, port = rogue_server.server_address[:2]
    rogue = RegistryClient(
        RegistryEndpoint(f"http://{host}:{port}", "t"), retry_delays=()
    )
    sink = io.BytesIO()
    with pytest.raises(IntegrityError):
        rogue.fetch_blob(MD5_HELLO, sink)
    assert sink.getvalue() == b""  # partial bytes never reach the sink


def test_tampered_snapshot_header_rejected(rogue_server, tmp_path):
    _RogueHandler.mode = "bad-header"
    host, port = rogue_server.server_address[:2]
    rogue = RegistryClient(
        RegistryEndpoint(f"http://{host}:{port}", "t"), retry_delays=()
    )
    with pytest.raises(IntegrityError):
        rogue.fetch_snapshot("o", "n", "f" * 40, tmp_path / "snap")
    assert not (tmp_path / "snap").exists()  # nothing unpacked


class _FlakyHandler(BaseHTTPRequestHandler):
    failures_left = 2
    hits = 0

    def log_message(self, fmt, *args):
        pass

    def do_GET(self):
        type(self).hits += 1
        if type(self).failures_left > 0:
            type(self).failures_left -= 1
            self.send_response(503)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        body = json.dumps([]).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def test_retry_on_server_errors():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    try:
        _FlakyHandler.failures_left = 2
        _FlakyHandler.hits = 0
        host, port = httpd.server_address[:2]
        delays: list[float] = []
        client = RegistryClient(
            RegistryEndpoint(f"http://{host}:{port}", "t"),
            retry_delays=(0.01, 0.02, 0.04),
            sleep=delays.append,
        )
        assert client.list_commits("a", "b") == []
        assert _FlakyHandler.hits == 3
        assert delays == [0.01, 0.02]
    finally:
        httpd.shutdown()
        httpd.server_close()


def test_network_error_after_exhausted_retries():
    client = RegistryClient(
        RegistryEndpoint("http://127.0.0.1:1", "t"),
        retry_delays=(0.0, 0.0, 0.0),
    )
    with pytest.raises(NetworkError):
        client.list_commits("a", "b")


def test_retry_converges_to_same_state(client, dev_store, tmp_path, registry_server):
    # A fetch that failed once can be retried and lands the same blobs.
    brick = forge_brick(tmp_path / "r", {"x.parquet": b"xx", "y.parquet": b"yy"})
    publish_brick(client, dev_store, brick, org="o", name="r")
    store = ContentStore(tmp_path / "clientcache")
    store.ensure()
    digests = [r.hash for r in brick.lockfile.outs_under("brick")]
    assert client.fetch_blobs(store, digests) == 2
    assert client.fetch_blobs(store, digests) == 0  # idempotent
    assert sorted(store.iter_digests()) == sorted(d.digest for d in digests)


def test_commit_ids_are_archive_sha1(client, dev_store, tmp_path):
    brick = forge_brick(tmp_path / "sha", {"z.parquet": b"zzz"})
    commit = publish_brick(client, dev_store, brick, org="o", name="sha")
    archive = build_snapshot_archive(brick.workdir)
    assert commit == hashlib.sha1(archive).hexdigest()
