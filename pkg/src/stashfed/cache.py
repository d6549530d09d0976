"""Regional cache: chunk store, watermark LRU eviction, fetch-through from origins."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Callable, Iterator
from urllib.parse import quote, urlsplit

from . import wire
from .core import (
    CHUNK_SIZE,
    FederationPath,
    FileCatalogEntry,
    GeoCoordinate,
    chunk_checksum,
    chunk_layout,
    chunks_for_range,
    normalize_path,
)
from .errors import CacheFull, IntegrityError, MalformedPath, NotFound, OriginUnreachable
from .redirector import RedirectorClient

log = logging.getLogger(__name__)

HIT, MISS, PARTIAL = "HIT", "MISS", "PARTIAL"
FETCH_RETRIES = 1
HEARTBEAT_INTERVAL = 60.0


@dataclass(frozen=True)
class CacheConfig:
    cache_id: str
    storage_dir: str
    capacity: int
    listen_endpoint: str = "127.0.0.1:0"
    redirector_endpoints: tuple[str, ...] = ()
    high_watermark: float = 0.90
    low_watermark: float = 0.70
    location: GeoCoordinate = GeoCoordinate(0.0, 0.0)
    heartbeat_interval: float = HEARTBEAT_INTERVAL
    origin_timeout: float = 60.0
    monitor_endpoint: str | None = None
    server_id: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "redirector_endpoints", tuple(self.redirector_endpoints))
        if not 0 < self.low_watermark < self.high_watermark <= 1:
            raise ValueError("need 0 < low_watermark < high_watermark <= 1")
        if self.capacity <= CHUNK_SIZE:
            raise ValueError(f"capacity must exceed one chunk ({CHUNK_SIZE} bytes)")
        if not self.cache_id:
            raise ValueError("cache_id must be non-empty")


@dataclass(eq=False)
class CacheEntry:
    path: FederationPath
    total_size: int
    chunk_size: int = CHUNK_SIZE
    chunks_present: set[int] = field(default_factory=set)
    last_access: float = 0.0
    in_use: int = 0
    bytes_stored: int = 0
    digests: tuple[bytes, ...] | None = None
    origin: str | None = None

    @property
    def verified(self) -> bool:
        return self.digests is not None

    @property
    def chunk_total(self) -> int:
        return len(chunk_layout(self.total_size, self.chunk_size))


class SpaceManager:
    """Byte accounting and whole-entry LRU eviction between two watermarks.

    Not thread-safe on its own; the owning cache serializes calls.
    """

    def __init__(self, capacity: int, high_watermark: float = 0.90, low_watermark: float = 0.70):
        self.capacity = capacity
        self.high = high_watermark
        self.low = low_watermark
        self.entries: dict[FederationPath, CacheEntry] = {}
        self.usage = 0
        self.evictions = 0
        self.last_batch: list[CacheEntry] = []
        self.on_evict: Callable[[CacheEntry], None] | None = None

    @property
    def high_bytes(self) -> float:
        return self.high * self.capacity

    @property
    def low_bytes(self) -> float:
        return self.low * self.capacity

    def lru_order(self, exclude: FederationPath | None = None) -> list[CacheEntry]:
        """Evictable entries, least recently used first (ties by path)."""
        cands = [e for e in self.entries.values() if e.in_use == 0 and e.path != exclude]
        cands.sort(key=lambda e: (e.last_access, e.path))
        return cands

    def evict(self, bytes_needed: int, exclude: FederationPath | None = None) -> int:
        """Drop LRU entries until usage is at the low watermark; returns bytes freed.

        Keeps going past the low watermark only if ``bytes_needed`` would
        otherwise overflow the raw capacity. Raises CacheFull when nothing
        evictable is left and the request still does not fit.
        """
        batch: list[CacheEntry] = []
        freed = 0
        for e in self.lru_order(exclude):
            if self.usage <= self.low_bytes and self.usage + bytes_needed <= self.capacity:
                break
            freed += self._remove(e)
            batch.append(e)
        self.last_batch = batch
        stuck_above_low = self.usage > self.low_bytes and self.usage + bytes_needed > self.high_bytes
        if stuck_above_low or self.usage + bytes_needed > self.capacity:
            raise CacheFull(f"cannot admit {bytes_needed} bytes; usage {self.usage} of {self.capacity}")
        return freed

    def _remove(self, entry: CacheEntry) -> int:
        del self.entries[entry.path]
        freed = entry.bytes_stored
        self.usage -= freed
        self.evictions += 1
        entry.bytes_stored = 0
        entry.chunks_present.clear()
        if self.on_evict is not None:
            self.on_evict(entry)
        return freed

    def reserve(self, entry: CacheEntry, nbytes: int) -> None:
        """Account ``nbytes`` for ``entry``, evicting others first if needed."""
        self.last_batch = []
        if self.usage + nbytes > self.high_bytes:
            self.evict(nbytes, exclude=entry.path)
        self.entries.setdefault(entry.path, entry)
        entry.bytes_stored += nbytes
        self.usage += nbytes

    def touch(self, entry: CacheEntry, now: float) -> None:
        entry.last_access = now
        self.entries.setdefault(entry.path, entry)


class CacheResponse:
    """A planned read: status is fixed up front, bytes are produced lazily.

    Iterating fetches missing chunks as they are reached. The entry stays
    pinned against eviction until iteration ends or :meth:`close` is called.
    """

    def __init__(self, cache: "Cache", entry: CacheEntry, start: int, end: int, status: str):
        self.cache = cache
        self.entry = entry
        self.start = start
        self.end = end
        self.status = status
        self.bytes_sent = 0
        self._closed = False

    @property
    def size(self) -> int:
        return self.entry.total_size

    def __iter__(self) -> Iterator[bytes]:
        try:
            e = self.entry
            for idx in chunks_for_range(e.total_size, self.start, self.end, e.chunk_size):
                data = self.cache.get_chunk(e, idx)
                off = idx * e.chunk_size
                lo, hi = max(self.start, off) - off, min(self.end, off + len(data)) - off
                piece = data[lo:hi]
                if self.cache.mutator is not None:
                    piece = self.cache.mutator(e.path, off + lo, piece)
                self.bytes_sent += len(piece)
                yield piece
        finally:
            self.close()

    def read(self) -> bytes:
        return b"".join(self)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.cache._release(self.entry)


def _chunk_dir(root: str, path: str) -> str:
    h = hashlib.sha256(path.encode("utf-8")).hexdigest()
    return os.path.join(root, "objects", h[:2], h)


class Cache:
    def __init__(self, config: CacheConfig, clock: Callable[[], float] = time.time, monitor=None,
                 redirectors: RedirectorClient | None = None):
        self.config = config
        self.clock = clock
        self.monitor = monitor
        self.redirectors = redirectors or RedirectorClient(config.redirector_endpoints)
        self.space = SpaceManager(config.capacity, config.high_watermark, config.low_watermark)
        self.space.on_evict = self._drop_files
        self._lock = threading.RLock()
        self._inflight: dict[tuple[FederationPath, int], Future] = {}
        self._meta_inflight: dict[FederationPath, Future] = {}
        # test hook: (path, offset, data) -> data, applied to bytes leaving the cache
        self.mutator: Callable[[FederationPath, int, bytes], bytes] | None = None
        self.counters = {"hits": 0, "misses": 0, "partials": 0, "origin_fetches": 0,
                         "integrity_failures": 0, "passthrough_chunks": 0}
        self.usage_high_water = 0
        objects = os.path.join(config.storage_dir, "objects")
        shutil.rmtree(objects, ignore_errors=True)
        os.makedirs(objects, exist_ok=True)

    # -- metadata -------------------------------------------------------

    def _load_meta(self, path: FederationPath) -> CacheEntry:
        origin = self.redirectors.locate(path)
        try:
            resp = wire.request(origin, "GET", "/catalog?path=" + quote(path, safe="/"),
                                timeout=self.config.origin_timeout)
        except OSError as exc:
            raise OriginUnreachable(f"origin {origin}: {exc}") from exc
        chunk_size = int(resp.header("X-Chunk-Size") or CHUNK_SIZE)
        if resp.status == 200:
            cat = FileCatalogEntry.from_json(resp.body.decode("utf-8").strip(), chunk_size)
            return CacheEntry(path, cat.size, chunk_size, digests=cat.chunk_digests, origin=origin)
        # no catalog entry yet: serve unverified
        try:
            head = wire.request(origin, "HEAD", wire.data_target(path), timeout=self.config.origin_timeout)
        except OSError as exc:
            raise OriginUnreachable(f"origin {origin}: {exc}") from exc
        if head.status != 200:
            raise NotFound(path)
        return CacheEntry(path, int(head.header("X-Total-Size")), chunk_size, origin=origin)

    def _acquire(self, path: FederationPath) -> tuple[CacheEntry, bool]:
        """Return the pinned entry for ``path`` and whether it was already known."""
        while True:
            with self._lock:
                entry = self.space.entries.get(path)
                if entry is not None:
                    entry.in_use += 1
                    self.space.touch(entry, self.clock())
                    return entry, True
                fut = self._meta_inflight.get(path)
                leader = fut is None
                if leader:
                    fut = self._meta_inflight[path] = Future()
            if not leader:
                fut.result()
                continue
            try:
                entry = self._load_meta(path)
            except BaseException as exc:
                fut.set_exception(exc)
                with self._lock:
                    self._meta_inflight.pop(path, None)
                raise
            with self._lock:
                self._meta_inflight.pop(path, None)
                entry.in_use += 1
                self.space.touch(entry, self.clock())
            fut.set_result(entry)
            return entry, False

    def _release(self, entry: CacheEntry) -> None:
        with self._lock:
            entry.in_use -= 1
            entry.last_access = self.clock()

    def describe(self, path: str) -> tuple[CacheEntry, bool]:
        entry, known = self._acquire(FederationPath(path))
        self._release(entry)
        return entry, known

    # -- lookup / fetch --------------------------------------------------

    def cache_lookup(self, path: str, range_: tuple[int, int] | None = None) -> set[int]:
        """Chunk indices overlapping ``range_`` that are not stored locally.

        Needs the file size, so an unknown path is treated as whole-file-absent
        only when its size is already known; otherwise metadata is loaded.
        """
        entry, _ = self.describe(path)
        return self._needed(entry, range_)

    def _needed(self, entry: CacheEntry, range_: tuple[int, int] | None) -> set[int]:
        start, end = range_ if range_ is not None else (0, entry.total_size)
        with self._lock:
            return {i for i in chunks_for_range(entry.total_size, start, end, entry.chunk_size)
                    if i not in entry.chunks_present}

    def _origin_range(self, entry: CacheEntry, idx: int) -> bytes:
        spec = chunk_layout(entry.total_size, entry.chunk_size)[idx]
        target = wire.data_target(entry.path)
        headers = {"Range": wire.range_header(spec.offset, spec.end)}
        for attempt in range(2):
            origin = entry.origin
            try:
                with self._lock:
                    self.counters["origin_fetches"] += 1
                resp = wire.request(origin, "GET", target, headers=headers, timeout=self.config.origin_timeout)
                break
            except OSError as exc:
                if attempt:
                    raise OriginUnreachable(f"origin {origin}: {exc}") from exc
                # origin may have moved; ask the redirector again
                entry.origin = self.redirectors.locate(entry.path)
        if resp.status == 404:
            raise NotFound(entry.path)
        if resp.status not in (200, 206):
            raise OriginUnreachable(f"origin answered {resp.status}")
        return resp.body

    def _fetch_verified(self, entry: CacheEntry, idx: int) -> bytes:
        spec = chunk_layout(entry.total_size, entry.chunk_size)[idx]
        for _ in range(1 + FETCH_RETRIES):
            data = self._origin_range(entry, idx)
            ok = len(data) == spec.length
            if ok and entry.digests is not None:
                ok = chunk_checksum(data, entry.chunk_size) == entry.digests[idx]
            if ok:
                return data
            with self._lock:
                self.counters["integrity_failures"] += 1
            log.warning("chunk %d of %s failed verification", idx, entry.path)
        raise IntegrityError(f"{entry.path}: chunk {idx} failed verification", chunk_index=idx)

    def _commit(self, entry: CacheEntry, idx: int, data: bytes) -> bool:
        with self._lock:
            try:
                self.space.reserve(entry, len(data))
            except CacheFull:
                self.counters["passthrough_chunks"] += 1
                return False
            d = _chunk_dir(self.config.storage_dir, entry.path)
            os.makedirs(d, exist_ok=True)
            tmp = os.path.join(d, f"{idx}.tmp")
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, os.path.join(d, str(idx)))
            entry.chunks_present.add(idx)
            self.usage_high_water = max(self.usage_high_water, self.space.usage)
            return True

    def _read_local(self, entry: CacheEntry, idx: int) -> bytes:
        with open(os.path.join(_chunk_dir(self.config.storage_dir, entry.path), str(idx)), "rb") as fh:
            return fh.read()

    def get_chunk(self, entry: CacheEntry, idx: int) -> bytes:
        """Local chunk bytes, fetching once from the origin when absent.

        Concurrent callers for the same missing chunk share one origin fetch.
        """
        key = (entry.path, idx)
        with self._lock:
            if idx in entry.chunks_present:
                present = True
            else:
                present = False
                fut = self._inflight.get(key)
                leader = fut is None
                if leader:
                    fut = self._inflight[key] = Future()
        if present:
            return self._read_local(entry, idx)
        if not leader:
            return fut.result()
        try:
            data = self._fetch_verified(entry, idx)
            self._commit(entry, idx, data)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        else:
            fut.set_result(data)
            return data
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def fetch_from_origin(self, path: str, indices) -> None:
        entry, _ = self._acquire(FederationPath(path))
        try:
            for idx in sorted(indices):
                self.get_chunk(entry, idx)
        finally:
            self._release(entry)

    def evict(self, bytes_needed: int) -> int:
        with self._lock:
            return self.space.evict(bytes_needed)

    def _drop_files(self, entry: CacheEntry) -> None:
        shutil.rmtree(_chunk_dir(self.config.storage_dir, entry.path), ignore_errors=True)

    # -- request path ----------------------------------------------------

    def handle_request(self, path: str, range_: tuple[int, int] | None = None) -> CacheResponse:
        entry, known = self._acquire(FederationPath(path))
        return self.plan(entry, known, range_)

    def plan(self, entry: CacheEntry, known: bool, range_: tuple[int, int] | None) -> CacheResponse:
        """Classify a read of a pinned entry; the response takes over the pin."""
        try:
            start, end = range_ if range_ is not None else (0, entry.total_size)
            end = min(end, entry.total_size)
            with self._lock:
                wanted = set(chunks_for_range(entry.total_size, start, end, entry.chunk_size))
                needed = wanted - entry.chunks_present
                if not wanted:
                    status = HIT if known else MISS
                elif not needed:
                    status = HIT
                elif needed == wanted:
                    status = MISS
                else:
                    status = PARTIAL
                self.counters[{HIT: "hits", MISS: "misses", PARTIAL: "partials"}[status]] += 1
        except BaseException:
            self._release(entry)
            raise
        return CacheResponse(self, entry, start, max(start, end), status)

    def stats(self) -> dict:
        with self._lock:
            return {
                "usage_bytes": self.space.usage,
                "capacity": self.config.capacity,
                "entries": len(self.space.entries),
                "hits": self.counters["hits"],
                "misses": self.counters["misses"],
                "partials": self.counters["partials"],
                "origin_fetches": self.counters["origin_fetches"],
                "evictions": self.space.evictions,
                "integrity_failures": self.counters["integrity_failures"],
            }


class CacheHandler(wire.Handler):
    def _path(self) -> FederationPath:
        return normalize_path(wire.path_from_target(self.path, self._base()))

    def _base(self) -> str:
        return "/meta" if self.path.startswith("/meta/") else "/data"

    def _fail(self, exc: Exception) -> None:
        if isinstance(exc, (NotFound, MalformedPath)):
            self.send_error_text(404, "not found", {"X-Stash-Error": "not-found"})
        elif isinstance(exc, IntegrityError):
            self.send_error_text(502, str(exc), {"X-Stash-Error": "integrity",
                                                 "X-Stash-Chunk": str(exc.chunk_index)})
        elif isinstance(exc, (OriginUnreachable, OSError)):
            self.send_error_text(502, str(exc), {"X-Stash-Error": "origin-unreachable"})
        else:
            log.exception("cache request failed")
            self.send_error_text(500, "internal error")

    def do_HEAD(self) -> None:
        self.do_GET()

    def do_GET(self) -> None:
        cache: Cache = self.service
        url = urlsplit(self.path)
        if url.path == "/stats":
            self.send_json(200, cache.stats())
        elif url.path.startswith("/meta/"):
            try:
                entry, known = cache.describe(self._path())
            except Exception as exc:
                self._fail(exc)
                return
            meta = {"path": entry.path, "size": entry.total_size}
            if entry.verified:
                meta["chunks"] = [d.hex() for d in entry.digests]
            body = json.dumps(meta, separators=(",", ":"), ensure_ascii=False)
            self.send_bytes(200, (body + "\n").encode("utf-8"),
                            {"X-Chunk-Size": str(entry.chunk_size), "X-Cache": HIT if known else MISS,
                             "X-Verified": "1" if entry.verified else "0", "X-Total-Size": str(entry.total_size)},
                            content_type="application/json")
        elif url.path.startswith("/data/"):
            self._get_data(cache)
        else:
            self.send_error_text(404, "unknown endpoint")

    def _get_data(self, cache: Cache) -> None:
        try:
            path = self._path()
            entry, known = cache._acquire(path)
        except Exception as exc:
            self._fail(exc)
            return
        try:
            rng = wire.parse_range(self.headers.get("Range"), entry.total_size)
        except ValueError as exc:
            cache._release(entry)
            self.send_error_text(416, str(exc), {"Content-Range": f"bytes */{entry.total_size}"})
            return
        resp = cache.plan(entry, known, rng)
        host = self.client_address[0]
        fid = cache.monitor.open(host, 6 if ":" in host else 4, path, entry.total_size) if cache.monitor else None
        pieces = iter(resp)
        try:
            if self.command == "HEAD":
                first = b""
                resp.close()
            else:
                # fetch the first chunk before committing to a status line
                first = next(pieces, b"")
        except Exception as exc:
            self._fail(exc)
            return
        headers = {"X-Cache": resp.status, "X-Total-Size": str(resp.size), "Accept-Ranges": "bytes"}
        self.send_response(206 if rng is not None else 200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(resp.end - resp.start))
        if rng is not None:
            headers["Content-Range"] = f"bytes {resp.start}-{resp.end - 1}/{resp.size}"
        for k, v in headers.items():
            self.send_header(k, v)
        self.end_headers()
        if self.command == "HEAD":
            return
        try:
            self.wfile.write(first)
            for piece in pieces:
                self.wfile.write(piece)
        except Exception:
            # headers are out; the only signal left is a short body
            log.warning("aborting transfer of %s mid-stream", path, exc_info=True)
            self.close_connection = True
            raise
        finally:
            if cache.monitor:
                cache.monitor.close(fid, bytes_read=resp.bytes_sent)


class CacheServer:
    def __init__(self, config: CacheConfig, clock: Callable[[], float] = time.time, monitor=None):
        if monitor is None and config.monitor_endpoint:
            from .monitoring import ServerMonitor

            monitor = ServerMonitor(config.server_id, config.monitor_endpoint)
        self.cache = Cache(config, clock, monitor)
        self.http = wire.HTTPService(self.cache, CacheHandler, config.listen_endpoint)
        self._heartbeat: wire.Heartbeat | None = None

    @property
    def endpoint(self) -> str:
        return self.http.endpoint

    def descriptor(self) -> dict:
        loc = self.cache.config.location
        return {"cache_id": self.cache.config.cache_id, "endpoint": self.endpoint,
                "location": {"latitude": loc.latitude, "longitude": loc.longitude}}

    def register(self) -> None:
        for r in self.cache.config.redirector_endpoints:
            try:
                wire.post_json(r, "/register/cache", self.descriptor())
            except OSError as exc:
                log.warning("cache registration with %s failed: %s", r, exc)

    def start(self) -> "CacheServer":
        self.http.start()
        self._heartbeat = wire.Heartbeat(self.register, self.cache.config.heartbeat_interval, "cache-heartbeat").start()
        return self

    def stop(self) -> None:
        if self._heartbeat is not None:
            self._heartbeat.stop()
        self.http.stop()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="stashfed-cache", description="Regional federation cache")
    parser.add_argument("--id", required=True, dest="cache_id")
    parser.add_argument("--listen", default="127.0.0.1:8443")
    parser.add_argument("--redirectors", required=True, help="H:P[,H:P]")
    parser.add_argument("--dir", required=True, help="storage directory")
    parser.add_argument("--capacity", type=int, required=True, help="bytes")
    parser.add_argument("--high", type=float, default=0.90)
    parser.add_argument("--low", type=float, default=0.70)
    parser.add_argument("--lat", type=float, default=0.0)
    parser.add_argument("--lon", type=float, default=0.0)
    parser.add_argument("--monitor", default=None, help="UDP host:port of the monitoring collector")
    parser.add_argument("--server-id", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    config = CacheConfig(
        cache_id=args.cache_id,
        storage_dir=args.dir,
        capacity=args.capacity,
        listen_endpoint=args.listen,
        redirector_endpoints=tuple(wire.split_endpoints(args.redirectors)),
        high_watermark=args.high,
        low_watermark=args.low,
        location=GeoCoordinate(args.lat, args.lon),
        monitor_endpoint=args.monitor,
        server_id=args.server_id,
    )
    server = CacheServer(config).start()
    log.info("cache %s listening on %s", config.cache_id, server.endpoint)
    wire.run_until_signalled(server.stop)


if __name__ == "__main__":
    main()
