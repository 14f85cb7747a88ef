"""HTTP delivery of repository objects and the client-side cache.

Server endpoints (plain HTTP/1.1, one repository per server)::

    GET /<repo>/manifest?selector=<s>   manifest for a tag, snapshot or "newest"
    GET /<repo>/manifests/<revision>    manifest by revision number
    GET /<repo>/data/<xx>/<62 hex>      compressed object
    GET /<repo>/tags                    the tags file

The client keeps fetched objects in a :class:`CacheManager` laid out like the
store, so cache hits never touch the network.
"""

from __future__ import annotations

import logging
import os
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from collections import OrderedDict
from collections.abc import Callable, Iterable
from concurrent.futures import Future
from contextlib import contextmanager
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterator

from .errors import (
    IntegrityError,
    NotFound,
    PinExceedsQuota,
    QuotaTooSmall,
    UcvmError,
    UnknownSelector,
    Unreachable,
)
from .publisher import resolve_revision
from .repo_core import (
    Catalog,
    Kind,
    Manifest,
    ObjectStore,
    Repository,
    atomic_write,
    decode_catalog,
    decompress_verified,
    is_object_id,
    normalize_path,
    parent_path,
)

log = logging.getLogger(__name__)

DEFAULT_QUOTA = 4 * 1024**3
EVICT_LOW_WATER = 0.8
CONNECT_RETRIES = 3
BACKOFF_BASE = 0.5
PINFILE = "/.ucernvm_pinfiles"


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class RepoRequestHandler(BaseHTTPRequestHandler):
    server: RepoServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args: object) -> None:
        log.debug("%s - %s", self.address_string(), format % args)

    def _send(self, status: int, body: bytes, ctype: str = "application/octet-stream") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _not_found(self, why: str) -> None:
        self._send(HTTPStatus.NOT_FOUND, why.encode() + b"\n", "text/plain")

    def do_GET(self) -> None:  # noqa: N802
        url = urllib.parse.urlsplit(self.path)
        parts = [urllib.parse.unquote(p) for p in url.path.split("/") if p]
        repo = self.server.repo
        if not parts or parts[0] != repo.name:
            return self._not_found(f"no repository {parts[0] if parts else ''!r}")
        rest = parts[1:]
        try:
            if rest == ["manifest"]:
                selector = urllib.parse.parse_qs(url.query).get("selector", ["newest"])[0]
                body = repo.manifest_bytes(resolve_revision(repo, selector))
                return self._send(HTTPStatus.OK, body, "text/plain")
            if len(rest) == 2 and rest[0] == "manifests" and rest[1].isdigit():
                return self._send(HTTPStatus.OK, repo.manifest_bytes(int(rest[1])), "text/plain")
            if rest == ["tags"]:
                return self._send(HTTPStatus.OK, repo.tags_path.read_bytes(), "text/plain")
            if len(rest) == 3 and rest[0] == "data" and is_object_id(rest[1] + rest[2]):
                oid = rest[1] + rest[2]
                body = self.server.transform(oid, repo.store.read_compressed(oid))
                return self._send(HTTPStatus.OK, body)
        except (NotFound, FileNotFoundError) as exc:
            return self._not_found(str(exc))
        return self._not_found(f"no such endpoint {url.path}")


class RepoServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(
        self,
        repo: Repository,
        address: tuple[str, int] = ("127.0.0.1", 0),
        transform: Callable[[str, bytes], bytes] | None = None,
    ):
        self.repo = repo
        #: hook for fault injection; maps (oid, compressed bytes) to served bytes
        self.transform = transform or (lambda oid, body: body)
        self.requests_served = 0
        super().__init__(address, RepoRequestHandler)

    def process_request(self, request, client_address):  # type: ignore[no-untyped-def]
        self.requests_served += 1
        super().process_request(request, client_address)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


@contextmanager
def serve_in_thread(
    repo: Repository,
    address: tuple[str, int] = ("127.0.0.1", 0),
    transform: Callable[[str, bytes], bytes] | None = None,
) -> Iterator[RepoServer]:
    server = RepoServer(repo, address, transform)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join()


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class CacheManager:
    """Quota-bounded object cache with LRU eviction and pinning.

    Pinned objects are never evicted. The pin set and LRU order (file mtimes)
    are persisted so a restarted client sees the same cache.
    """

    def __init__(self, cache_dir: str | os.PathLike[str], quota_bytes: int = DEFAULT_QUOTA):
        if quota_bytes <= 0:
            raise QuotaTooSmall("cache quota must be positive")
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.quota_bytes = quota_bytes
        self.store = ObjectStore(self.cache_dir)
        self.manifest_dir = self.cache_dir / "manifests"
        self._pin_file = self.cache_dir / "pinned"
        self._lock = threading.RLock()
        self.lru: OrderedDict[str, int] = OrderedDict()
        found = []
        for oid in self.store:
            st = self.store.path_for(oid).stat()
            found.append((st.st_mtime_ns, oid, st.st_size))
        for _, oid, size in sorted(found):
            self.lru[oid] = size
        self.used_bytes = sum(self.lru.values())
        self.pinned: set[str] = set()
        if self._pin_file.exists():
            self.pinned = {
                line.strip() for line in self._pin_file.read_text().splitlines() if line.strip() in self.lru
            }
        self.evict_to_quota(self.quota_bytes)

    def __contains__(self, oid: object) -> bool:
        with self._lock:
            return oid in self.lru

    def lookup(self, oid: str) -> bytes | None:
        """Return cached bytes and mark *oid* most recently used, or None."""
        with self._lock:
            if oid not in self.lru:
                return None
            self.lru.move_to_end(oid)
        try:
            data = self.store.get_object(oid)
        except (NotFound, IntegrityError):
            log.warning("dropping unreadable cache entry %s", oid)
            self._forget(oid)
            return None
        try:
            os.utime(self.store.path_for(oid))
        except FileNotFoundError:
            pass
        return data

    def insert(self, oid: str, blob: bytes) -> bool:
        """Add a verified compressed blob; return False if it cannot fit."""
        size = len(blob)
        if size > self.quota_bytes:
            raise QuotaTooSmall(
                f"object {oid} needs {size} bytes, cache quota is {self.quota_bytes}"
            )
        with self._lock:
            if oid in self.lru:
                self.lru.move_to_end(oid)
                return True
            if self.used_bytes + size > self.quota_bytes:
                self.evict_to_quota(int(self.quota_bytes * EVICT_LOW_WATER) - size)
            if self.used_bytes + size > self.quota_bytes:
                return False
            atomic_write(self.store.path_for(oid), blob)
            self.lru[oid] = size
            self.used_bytes += size
            return True

    def evict_to_quota(self, target: int | None = None) -> list[str]:
        """Evict least recently used unpinned objects until usage <= *target*."""
        target = self.quota_bytes if target is None else max(target, 0)
        evicted = []
        with self._lock:
            for oid in list(self.lru):
                if self.used_bytes <= target:
                    break
                if oid in self.pinned:
                    continue
                self._forget(oid)
                evicted.append(oid)
        return evicted

    def _forget(self, oid: str) -> None:
        with self._lock:
            size = self.lru.pop(oid, None)
            if size is not None:
                self.used_bytes -= size
            self.pinned.discard(oid)
            self.store.delete(oid)

    def size_of(self, oid: str) -> int:
        with self._lock:
            return self.lru[oid]

    def set_pinned(self, oids: Iterable[str]) -> None:
        with self._lock:
            pinned = set(oids)
            missing = pinned - set(self.lru)
            if missing:
                raise NotFound(f"cannot pin uncached objects {sorted(missing)[:3]}")
            self.pinned = pinned
            atomic_write(self._pin_file, "".join(f"{o}\n" for o in sorted(pinned)).encode())

    def pinned_bytes(self) -> int:
        with self._lock:
            return sum(self.lru[o] for o in self.pinned)

    # manifests are tiny and kept outside the quota
    def save_manifest(self, key: str, data: bytes) -> None:
        atomic_write(self.manifest_dir / urllib.parse.quote(key, safe=""), data)

    def load_manifest(self, key: str) -> bytes | None:
        try:
            return (self.manifest_dir / urllib.parse.quote(key, safe="")).read_bytes()
        except FileNotFoundError:
            return None


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class TransferStats:
    requests: int = 0
    bytes_downloaded: int = 0
    objects_fetched: int = 0
    cache_hits: int = 0


class RepoClient:
    """On-demand reader of one repository through a :class:`CacheManager`."""

    def __init__(
        self,
        base_url: str,
        repo_name: str,
        cache: CacheManager,
        *,
        proxy: str | None = None,
        backoff_base: float = BACKOFF_BASE,
        connect_retries: int = CONNECT_RETRIES,
        timeout: float = 30.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.repo_name = repo_name
        self.cache = cache
        self.proxy = proxy
        self.backoff_base = backoff_base
        self.connect_retries = connect_retries
        self.timeout = timeout
        self.current_manifest: Manifest | None = None
        self.stats = TransferStats()
        # environment proxies are ignored on purpose; only the explicit one counts
        handlers = {"http": proxy, "https": proxy} if proxy else {}
        self._opener = urllib.request.build_opener(urllib.request.ProxyHandler(handlers))
        self._inflight: dict[str, Future[bytes]] = {}
        self._inflight_lock = threading.Lock()
        self._stats_lock = threading.Lock()

    def _url(self, *parts: str, query: dict[str, str] | None = None) -> str:
        path = "/".join(urllib.parse.quote(p, safe="") for p in (self.repo_name, *parts))
        url = f"{self.base_url}/{path}"
        if query:
            url += "?" + urllib.parse.urlencode(query)
        return url

    def _get(self, url: str) -> bytes:
        """GET with connection retries; HTTP 404 maps to NotFound."""
        delay = self.backoff_base
        for attempt in range(self.connect_retries + 1):
            with self._stats_lock:
                self.stats.requests += 1
            try:
                with self._opener.open(url, timeout=self.timeout) as resp:
                    body = resp.read()
                with self._stats_lock:
                    self.stats.bytes_downloaded += len(body)
                return body
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    raise NotFound(f"{url}: {exc.read().decode(errors='replace').strip()}") from None
                err: Exception = exc
            except (urllib.error.URLError, OSError) as exc:
                err = exc
            if attempt < self.connect_retries:
                log.debug("GET %s failed (%s); retrying in %.2fs", url, err, delay)
                time.sleep(delay)
                delay *= 2
        raise Unreachable(f"{url}: {err}")

    def _store_manifest(self, key: str, body: bytes) -> Manifest:
        manifest = Manifest.from_bytes(body)
        if manifest.repo_name != self.repo_name:
            raise UcvmError(f"server returned manifest of {manifest.repo_name!r}")
        self.cache.save_manifest(key, body)
        # a pinned reboot asks by revision, so keep that key warm too
        self.cache.save_manifest(f"revision:{manifest.revision}", body)
        return manifest

    def _manifest(self, key: str, url: str, missing: type[NotFound]) -> Manifest:
        try:
            body = self._get(url)
        except Unreachable:
            cached = self.cache.load_manifest(key)
            if cached is None:
                raise
            log.info("network unavailable, using cached manifest for %s", key)
            manifest = Manifest.from_bytes(cached)
            object.__setattr__(manifest, "from_cache", True)
            return manifest
        except NotFound as exc:
            raise missing(str(exc)) from None
        return self._store_manifest(key, body)

    def fetch_manifest(self, selector: str) -> Manifest:
        manifest = self._manifest(
            f"selector:{selector}", self._url("manifest", query={"selector": selector}), UnknownSelector
        )
        self.current_manifest = manifest
        return manifest

    def fetch_manifest_revision(self, revision: int) -> Manifest:
        manifest = self._manifest(f"revision:{revision}", self._url("manifests", str(revision)), NotFound)
        self.current_manifest = manifest
        return manifest

    def fetch_catalog(self, manifest: Manifest) -> Catalog:
        return decode_catalog(self.fetch_object(manifest.root_catalog))

    def fetch_object(self, oid: str) -> bytes:
        data = self.cache.lookup(oid)
        if data is not None:
            with self._stats_lock:
                self.stats.cache_hits += 1
            return data
        with self._inflight_lock:
            fut = self._inflight.get(oid)
            owner = fut is None
            if owner:
                fut = self._inflight[oid] = Future()
        assert fut is not None
        if not owner:
            return fut.result()
        try:
            data = self._download(oid)
            fut.set_result(data)
            return data
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        finally:
            with self._inflight_lock:
                self._inflight.pop(oid, None)

    def _download(self, oid: str) -> bytes:
        url = self._url("data", oid[:2], oid[2:])
        for attempt in (1, 2):
            try:
                blob = self._get(url)
            except NotFound:
                raise NotFound(f"object {oid} not on server") from None
            try:
                data = decompress_verified(oid, blob)
            except IntegrityError:
                if attempt == 2:
                    raise
                log.warning("object %s failed verification, retrying once", oid)
                continue
            with self._stats_lock:
                self.stats.objects_fetched += 1
            if not self.cache.insert(oid, blob):
                log.warning("cache full of pinned objects; %s served uncached", oid)
            return data
        raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Pinning
# ---------------------------------------------------------------------------


@dataclass
class PinSet:
    paths: list[str] = field(default_factory=list)
    #: lines that are not absolute paths
    invalid: list[str] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> PinSet:
        pins = cls()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                pins.paths.append(normalize_path(line))
            except ValueError:
                pins.invalid.append(line)
        return pins


@dataclass
class PinReport:
    pinned: list[str] = field(default_factory=list)
    unknown: list[str] = field(default_factory=list)
    objects: int = 0
    bytes: int = 0


def _resolve_in_catalog(catalog: Catalog, path: str, hops: int = 8) -> str | None:
    """Follow symlinks in the final component; intermediate links are not followed."""
    while hops >= 0:
        d = catalog.get(path)
        if d is None:
            return None
        if d.kind is not Kind.SYMLINK:
            return path
        target = d.target or ""
        base = "/" if target.startswith("/") else parent_path(path)
        parts: list[str] = [p for p in base.split("/") if p]
        for part in target.split("/"):
            if part in ("", "."):
                continue
            if part == "..":
                if parts:
                    parts.pop()
            else:
                parts.append(part)
        path = "/" + "/".join(parts)
        hops -= 1
    return None


def pin_objects_for(catalog: Catalog, path: str) -> list[str] | None:
    """Content ids needed to keep *path* readable offline; None if unknown."""
    real = _resolve_in_catalog(catalog, path)
    if real is None:
        return None
    d = catalog[real]
    if d.kind is Kind.FILE:
        return [d.content]  # type: ignore[list-item]
    prefix = real.rstrip("/") + "/"
    return [e.content for p, e in catalog.files() if p.startswith(prefix)]  # type: ignore[misc]


def pin(
    client: RepoClient,
    pinset: PinSet,
    catalog: Catalog,
    *,
    extra_ids: Iterable[str] = (),
) -> PinReport:
    """Fetch every object behind *pinset* and mark the set pinned.

    The new pin set replaces the previous one. Directories pin every file
    below them. Unknown paths are reported, not fatal.
    """
    report = PinReport(unknown=list(pinset.invalid))
    wanted: list[str] = list(extra_ids)
    for path in pinset.paths:
        oids = pin_objects_for(catalog, path)
        if oids is None:
            report.unknown.append(path)
            continue
        report.pinned.append(path)
        wanted.extend(oids)
    wanted = list(dict.fromkeys(wanted))

    cache = client.cache
    previous = set(cache.pinned)
    try:
        for oid in wanted:
            try:
                client.fetch_object(oid)
            except QuotaTooSmall as exc:
                raise PinExceedsQuota(str(exc)) from None
            with cache._lock:
                if oid not in cache:
                    raise PinExceedsQuota(
                        f"pinned objects exceed the cache quota of {cache.quota_bytes} bytes"
                    )
                # pin incrementally so later fetches cannot evict earlier pins
                cache.pinned.add(oid)
        cache.set_pinned(wanted)
    except PinExceedsQuota:
        cache.pinned = {o for o in previous if o in cache}
        raise
    report.objects = len(wanted)
    report.bytes = sum(cache.size_of(o) for o in wanted)
    return report


def read_pinset(reader: Callable[[str], bytes]) -> PinSet | None:
    try:
        return PinSet.parse(reader(PINFILE).decode("utf-8", "replace"))
    except NotFound:
        return None

