from __future__ import annotations

import os
import random
import threading
import time
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst

from ucvm.errors import (
    IntegrityError,
    NotFound,
    PinExceedsQuota,
    QuotaTooSmall,
    Unreachable,
    UnknownSelector,
)
from ucvm.publisher import publish_snapshot, set_tag
from ucvm.repo_core import ObjectStore, Repository, object_id
from ucvm.transport import (
    CacheManager,
    PinSet,
    RepoClient,
    pin,
    read_pinset,
    serve_in_thread,
)


def _client(url: str, cache_dir: Path, quota: int = 1 << 30, **kw: object) -> RepoClient:
    kw.setdefault("backoff_base", 0.01)
    return RepoClient(url, "os", CacheManager(cache_dir, quota), **kw)  # type: ignore[arg-type]


def _free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------------------
# Server endpoints
# ---------------------------------------------------------------------------


def test_server_endpoints(repo: Repository, server) -> None:
    m = publish_snapshot(repo, {"/bin/sh": b"sh"}, "1.0", "production")
    get = lambda path: urllib.request.urlopen(server.url + path).read()  # noqa: E731
    assert get("/os/manifest?selector=production") == repo.manifest_bytes(1)
    assert get("/os/manifests/1") == repo.manifest_bytes(1)
    assert b"tag production 1" in get("/os/tags")
    oid = m.root_catalog
    assert get(f"/os/data/{oid[:2]}/{oid[2:]}") == repo.store.read_compressed(oid)
    for bad in ("/os/manifest?selector=nope", "/other/tags", f"/os/data/{'0' * 2}/{'0' * 62}", "/os/x"):
        with pytest.raises(urllib.error.HTTPError) as exc:
            get(bad)
        assert exc.value.code == 404


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def test_fetch_manifest_echoes_server_tags(repo: Repository, server, tmp_path: Path) -> None:
    publish_snapshot(repo, {"/a": b"1"}, "1.0", "production")
    publish_snapshot(repo, {"/a": b"2"}, "2.0")
    client = _client(server.url, tmp_path / "c")
    assert client.fetch_manifest("production").revision == 1
    set_tag(repo, "production", 2)
    m = client.fetch_manifest("production")
    assert m.revision == 2 and not m.from_cache
    assert client.current_manifest == m
    with pytest.raises(UnknownSelector):
        client.fetch_manifest("no-such-tag")


def test_manifest_falls_back_to_cache_when_server_is_gone(repo: Repository, tmp_path: Path) -> None:
    publish_snapshot(repo, {"/a": b"1"}, "1.0", "production")
    with serve_in_thread(repo) as srv:
        client = _client(srv.url, tmp_path / "c")
        live = client.fetch_manifest("production")
        url = srv.url
    offline = _client(url, tmp_path / "c")
    cached = offline.fetch_manifest("production")
    assert cached == live and cached.from_cache
    with pytest.raises(Unreachable):
        offline.fetch_manifest("testing")


def test_connection_retries_with_backoff(tmp_path: Path) -> None:
    client = _client(f"http://127.0.0.1:{_free_port()}", tmp_path / "c", backoff_base=0.02)
    start = time.monotonic()
    with pytest.raises(Unreachable):
        client.fetch_manifest("newest")
    elapsed = time.monotonic() - start
    assert client.stats.requests == 4  # one try plus three retries
    assert elapsed >= 0.02 + 0.04 + 0.08


# ---------------------------------------------------------------------------
# Objects
# ---------------------------------------------------------------------------


def test_second_fetch_is_served_from_cache(repo: Repository, server, tmp_path: Path) -> None:
    oid = repo.store.put_object(b"payload" * 100)
    client = _client(server.url, tmp_path / "c")
    assert client.fetch_object(oid) == b"payload" * 100
    served, requests = server.requests_served, client.stats.requests
    assert client.fetch_object(oid) == b"payload" * 100
    assert server.requests_served == served
    assert client.stats.requests == requests
    assert client.stats.cache_hits == 1


def test_quota_smaller_than_object(repo: Repository, server, tmp_path: Path) -> None:
    oid = repo.store.put_object(os.urandom(4096))
    client = _client(server.url, tmp_path / "c", quota=100)
    with pytest.raises(QuotaTooSmall):
        client.fetch_object(oid)


def _flip(body: bytes) -> bytes:
    return body[:-1] + bytes([body[-1] ^ 0xFF])


def test_corrupted_object_fails_after_one_retry(repo: Repository, tmp_path: Path) -> None:
    oid = repo.store.put_object(b"precious")
    hits = []

    def corrupt(o: str, body: bytes) -> bytes:
        hits.append(o)
        return _flip(body)

    with serve_in_thread(repo, transform=corrupt) as srv:
        client = _client(srv.url, tmp_path / "c")
        with pytest.raises(IntegrityError):
            client.fetch_object(oid)
    assert hits == [oid, oid]
    assert oid not in client.cache


def test_transient_corruption_is_retried(repo: Repository, tmp_path: Path) -> None:
    oid = repo.store.put_object(b"precious")
    hits = []

    def once(o: str, body: bytes) -> bytes:
        hits.append(o)
        return _flip(body) if len(hits) == 1 else body

    with serve_in_thread(repo, transform=once) as srv:
        client = _client(srv.url, tmp_path / "c")
        assert client.fetch_object(oid) == b"precious"
    assert len(hits) == 2


def test_concurrent_fetches_are_single_flighted(repo: Repository, tmp_path: Path) -> None:
    oid = repo.store.put_object(b"slow" * 1000)
    hits = []

    def slow(o: str, body: bytes) -> bytes:
        hits.append(o)
        time.sleep(0.2)
        return body

    with serve_in_thread(repo, transform=slow) as srv:
        client = _client(srv.url, tmp_path / "c")
        results = []
        threads = [threading.Thread(target=lambda: results.append(client.fetch_object(oid))) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert results == [b"slow" * 1000] * 8
    assert hits == [oid]
    assert client.stats.objects_fetched == 1


def test_environment_proxy_is_ignored(repo: Repository, server, tmp_path: Path, monkeypatch) -> None:
    oid = repo.store.put_object(b"direct")
    monkeypatch.setenv("http_proxy", f"http://127.0.0.1:{_free_port()}")
    monkeypatch.setenv("HTTP_PROXY", f"http://127.0.0.1:{_free_port()}")
    assert _client(server.url, tmp_path / "c").fetch_object(oid) == b"direct"


class _RecordingProxy(BaseHTTPRequestHandler):
    seen: list[str] = []

    def log_message(self, *args: object) -> None:
        pass

    def do_GET(self) -> None:  # noqa: N802
        self.seen.append(self.path)
        opener = urllib.request.build_opener(urllib.request.ProxyHandler({}))
        with opener.open(self.path) as upstream:
            body = upstream.read()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def test_explicit_proxy_is_used(repo: Repository, server, tmp_path: Path) -> None:
    oid = repo.store.put_object(b"via proxy")
    proxy = ThreadingHTTPServer(("127.0.0.1", 0), _RecordingProxy)
    thread = threading.Thread(target=proxy.serve_forever, daemon=True)
    thread.start()
    try:
        client = _client(server.url, tmp_path / "c", proxy=f"http://127.0.0.1:{proxy.server_address[1]}")
        assert client.fetch_object(oid) == b"via proxy"
    finally:
        proxy.shutdown()
        proxy.server_close()
    assert _RecordingProxy.seen and _RecordingProxy.seen[-1].startswith(server.url)


# ---------------------------------------------------------------------------
# Cache manager
# ---------------------------------------------------------------------------


def _blob(store: ObjectStore, data: bytes) -> tuple[str, bytes]:
    oid = store.put_object(data)
    return oid, store.read_compressed(oid)


def _disk_usage(cache: CacheManager) -> int:
    return sum(cache.store.path_for(o).stat().st_size for o in cache.store)


def test_lru_eviction_goes_down_to_low_water(tmp_path: Path) -> None:
    src = ObjectStore(tmp_path / "src")
    blobs = [_blob(src, os.urandom(1000)) for _ in range(10)]
    size = len(blobs[0][1])
    cache = CacheManager(tmp_path / "c", quota_bytes=size * 5)
    for oid, blob in blobs[:5]:
        assert cache.insert(oid, blob)
    cache.lookup(blobs[0][0])  # refresh the oldest
    assert cache.insert(*blobs[5])
    # evicted down to 80% of quota before inserting: the 2 least recently used go
    assert blobs[0][0] in cache
    assert blobs[1][0] not in cache and blobs[2][0] not in cache
    assert cache.used_bytes <= cache.quota_bytes
    assert cache.used_bytes == _disk_usage(cache)


def test_pinned_objects_survive_pressure(tmp_path: Path) -> None:
    src = ObjectStore(tmp_path / "src")
    blobs = [_blob(src, os.urandom(500)) for _ in range(30)]
    cache = CacheManager(tmp_path / "c", quota_bytes=len(blobs[0][1]) * 6)
    cache.insert(*blobs[0])
    cache.set_pinned([blobs[0][0]])
    for b in blobs[1:]:
        cache.insert(*b)
    assert blobs[0][0] in cache
    assert cache.used_bytes <= cache.quota_bytes


def test_cache_state_survives_restart(tmp_path: Path) -> None:
    src = ObjectStore(tmp_path / "src")
    blobs = [_blob(src, os.urandom(300)) for _ in range(4)]
    cache = CacheManager(tmp_path / "c", quota_bytes=1 << 20)
    for b in blobs:
        cache.insert(*b)
    cache.set_pinned([blobs[1][0]])
    cache.save_manifest("selector:production", b"m")
    again = CacheManager(tmp_path / "c", quota_bytes=1 << 20)
    assert set(again.lru) == {o for o, _ in blobs}
    assert again.pinned == {blobs[1][0]}
    assert again.load_manifest("selector:production") == b"m"
    # a stray temporary file from an interrupted write is not an object
    (again.store.path_for(blobs[0][0]).parent / ".tmp-partial").write_bytes(b"junk")
    assert set(CacheManager(tmp_path / "c", quota_bytes=1 << 20).lru) == {o for o, _ in blobs}


def test_restart_with_smaller_quota_evicts(tmp_path: Path) -> None:
    src = ObjectStore(tmp_path / "src")
    blobs = [_blob(src, os.urandom(300)) for _ in range(6)]
    cache = CacheManager(tmp_path / "c", quota_bytes=1 << 20)
    for b in blobs:
        cache.insert(*b)
    small = CacheManager(tmp_path / "c", quota_bytes=len(blobs[0][1]) * 3)
    assert small.used_bytes <= small.quota_bytes
    assert small.used_bytes == _disk_usage(small)


@settings(max_examples=40, deadline=None)
@given(hst.lists(hst.tuples(hst.sampled_from(["insert", "lookup", "pin"]), hst.integers(0, 11)), max_size=60))
def test_cache_invariants_under_random_operations(ops: list[tuple[str, int]]) -> None:
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        src = ObjectStore(Path(d) / "src")
        rng = random.Random(len(ops))
        blobs = [_blob(src, rng.randbytes(200 + 50 * i)) for i in range(12)]
        quota = 2000
        cache = CacheManager(Path(d) / "c", quota_bytes=quota)
        pinned: set[str] = set()
        for op, i in ops:
            oid, blob = blobs[i]
            if op == "insert":
                cache.insert(oid, blob)
            elif op == "lookup":
                data = cache.lookup(oid)
                assert data is None or object_id(data) == oid
            elif oid in cache and cache.pinned_bytes() + cache.size_of(oid) <= quota // 2:
                pinned.add(oid)
                cache.set_pinned(pinned)
            assert cache.used_bytes <= quota
            assert cache.used_bytes == _disk_usage(cache)
            assert pinned <= set(cache.lru)


# ---------------------------------------------------------------------------
# Pinning
# ---------------------------------------------------------------------------


def _pin_repo(repo: Repository) -> None:
    tree = {
        "/bin/sh": b"#!/bin/sh\n" * 10,
        "/lib": "usr/lib",
        "/usr/lib/libc.so": b"libc" * 100,
        "/usr/lib/libm.so": b"libm" * 100,
        "/etc/motd": b"hello",
        "/.ucernvm_pinfiles": b"/bin/sh\n# comment\n/lib\n/no/such/file\nrelative/path\n",
    }
    publish_snapshot(repo, tree, "1.0", "production")


def test_pinfile_parsing() -> None:
    p = PinSet.parse("/bin/sh\n  # full comment\n/etc/x  # trailing\n\nrel\n")
    assert p.paths == ["/bin/sh", "/etc/x"]
    assert p.invalid == ["rel"]


def test_pin_reports_unknown_and_follows_directories(repo: Repository, server, tmp_path: Path) -> None:
    _pin_repo(repo)
    client = _client(server.url, tmp_path / "c")
    catalog = client.fetch_catalog(client.fetch_manifest("production"))
    pinset = read_pinset(lambda p: client.fetch_object(catalog[p].content))
    assert pinset is not None
    report = pin(client, pinset, catalog)
    assert report.pinned == ["/bin/sh", "/lib"]
    assert sorted(report.unknown) == ["/no/such/file", "relative/path"]
    expected = {catalog[p].content for p in ("/bin/sh", "/usr/lib/libc.so", "/usr/lib/libm.so")}
    assert client.cache.pinned == expected
    assert report.objects == 3


def test_pin_survives_cache_pressure(repo: Repository, server, tmp_path: Path) -> None:
    files = {f"/data/f{i}": os.urandom(2000) for i in range(20)}
    files["/bin/sh"] = os.urandom(2000)
    publish_snapshot(repo, files, "1.0")
    client = _client(server.url, tmp_path / "c", quota=12_000)
    catalog = client.fetch_catalog(client.fetch_manifest("newest"))
    pin(client, PinSet(["/bin/sh"]), catalog)
    for i in range(20):
        client.fetch_object(catalog[f"/data/f{i}"].content)
    assert catalog["/bin/sh"].content in client.cache
    assert client.cache.used_bytes <= 12_000


def test_pin_exceeding_quota(repo: Repository, server, tmp_path: Path) -> None:
    mb = 1 << 20
    files = {f"/big/f{i}": os.urandom(mb) for i in range(10)}
    publish_snapshot(repo, files, "1.0")
    client = _client(server.url, tmp_path / "c", quota=5 * mb)
    catalog = client.fetch_catalog(client.fetch_manifest("newest"))
    with pytest.raises(PinExceedsQuota):
        pin(client, PinSet(["/big"]), catalog)
    assert client.cache.used_bytes <= 5 * mb


def test_new_pinset_replaces_old(repo: Repository, server, tmp_path: Path) -> None:
    _pin_repo(repo)
    client = _client(server.url, tmp_path / "c")
    catalog = client.fetch_catalog(client.fetch_manifest("production"))
    pin(client, PinSet(["/bin/sh"]), catalog)
    pin(client, PinSet(["/etc/motd"]), catalog)
    assert client.cache.pinned == {catalog["/etc/motd"].content}


def test_missing_pinfile_reads_as_none() -> None:
    def reader(path: str) -> bytes:
        raise NotFound(path)

    assert read_pinset(reader) is None
