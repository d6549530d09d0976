"""Data origin: authoritative byte server plus the catalog indexer."""

from __future__ import annotations

import argparse
import logging
import os
import stat
import threading
import time
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping
from urllib.parse import parse_qs, urlsplit

from . import wire
from .core import (
    CHUNK_SIZE,
    FederationPath,
    FileCatalogEntry,
    chunk_checksum,
    dump_catalog,
    iter_file_chunks,
    normalize_path,
)
from .errors import MalformedPath, NotFound, RangeUnsatisfiable

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 60.0

# (mtime whole seconds, size)
FileStat = tuple[int, int]


@dataclass(frozen=True)
class OriginConfig:
    namespace_prefix: FederationPath
    root_dir: str
    listen_endpoint: str = "127.0.0.1:0"
    redirector_endpoints: tuple[str, ...] = ()
    reindex_interval: float = 30.0
    heartbeat_interval: float = HEARTBEAT_INTERVAL
    chunk_size: int = CHUNK_SIZE
    monitor_endpoint: str | None = None
    server_id: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "namespace_prefix", FederationPath(self.namespace_prefix))
        object.__setattr__(self, "redirector_endpoints", tuple(self.redirector_endpoints))
        if not os.path.isdir(self.root_dir) or not os.access(self.root_dir, os.R_OK | os.X_OK):
            raise ValueError(f"root_dir {self.root_dir!r} is not a readable directory")


@dataclass(frozen=True)
class IndexState:
    catalog: Mapping[FederationPath, FileCatalogEntry] = field(default_factory=dict)
    last_scan: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "catalog", MappingProxyType(dict(self.catalog)))

    def stats(self) -> dict[FederationPath, FileStat]:
        return {p: (e.mtime, e.size) for p, e in self.catalog.items()}

    def catalog_text(self) -> str:
        return dump_catalog(self.catalog.values())


def scan_stats(root_dir: str, namespace_prefix: str) -> dict[FederationPath, tuple[FileStat, int, str]]:
    """Stat every regular file under ``root_dir`` without reading contents.

    Symlinks are not followed and non-regular files are skipped.
    Returns path -> ((mtime, size), mode, local filename).
    """
    prefix = FederationPath(namespace_prefix)
    out: dict[FederationPath, tuple[FileStat, int, str]] = {}
    stack = [root_dir]
    while stack:
        d = stack.pop()
        with os.scandir(d) as it:
            for de in it:
                st = de.stat(follow_symlinks=False)
                if stat.S_ISDIR(st.st_mode):
                    stack.append(de.path)
                elif stat.S_ISREG(st.st_mode):
                    rel = os.path.relpath(de.path, root_dir).replace(os.sep, "/")
                    fpath = prefix.join(rel)
                    out[fpath] = ((int(st.st_mtime), st.st_size), stat.S_IMODE(st.st_mode), de.path)
    return out


def detect_changes(previous: IndexState, current: Mapping[FederationPath, FileStat]) -> set[FederationPath]:
    """Paths that are new, deleted, or whose (mtime, size) differ from ``previous``."""
    old = previous.stats()
    changed = {p for p, s in current.items() if old.get(p) != s}
    changed.update(p for p in old if p not in current)
    return changed


class Indexer:
    """Builds catalogs for one origin tree.

    ``files_hashed`` / ``bytes_hashed`` count content reads so callers can
    check that unchanged files are never re-read.
    """

    def __init__(self, root_dir: str, namespace_prefix: str, chunk_size: int = CHUNK_SIZE,
                 clock: Callable[[], float] = time.time):
        self.root_dir = root_dir
        self.prefix = FederationPath(namespace_prefix)
        self.chunk_size = chunk_size
        self.clock = clock
        self.files_hashed = 0
        self.bytes_hashed = 0

    def _hash_entry(self, path: FederationPath, fstat: FileStat, mode: int, local: str) -> FileCatalogEntry:
        digests = []
        size = 0
        with open(local, "rb") as fh:
            for block in iter_file_chunks(fh, self.chunk_size):
                digests.append(chunk_checksum(block, self.chunk_size))
                size += len(block)
        self.files_hashed += 1
        self.bytes_hashed += size
        if size != fstat[1]:
            # file changed while hashing; re-stat so the catalog stays self-consistent
            st = os.stat(local, follow_symlinks=False)
            fstat = (int(st.st_mtime), size)
        return FileCatalogEntry(path, size, fstat[0], mode, tuple(digests), self.chunk_size)

    def index_tree(self) -> IndexState:
        stats = scan_stats(self.root_dir, self.prefix)
        catalog = {p: self._hash_entry(p, s, m, loc) for p, (s, m, loc) in stats.items()}
        return IndexState(catalog, self.clock())

    def refresh(self, previous: IndexState) -> IndexState:
        """Incremental rescan: re-hash only what :func:`detect_changes` reports."""
        stats = scan_stats(self.root_dir, self.prefix)
        changed = detect_changes(previous, {p: s for p, (s, _, _) in stats.items()})
        catalog = dict(previous.catalog)
        for p in changed:
            if p in stats:
                s, m, loc = stats[p]
                catalog[p] = self._hash_entry(p, s, m, loc)
            else:
                catalog.pop(p, None)
        for p, (s, m, _) in stats.items():
            # mode-only changes do not trigger a re-hash but are still recorded
            if p not in changed and catalog[p].permissions != m:
                e = catalog[p]
                catalog[p] = FileCatalogEntry(e.path, e.size, e.mtime, m, e.chunk_digests, e.chunk_size)
        return IndexState(catalog, self.clock())


def index_tree(root_dir: str, namespace_prefix: str, chunk_size: int = CHUNK_SIZE) -> IndexState:
    return Indexer(root_dir, namespace_prefix, chunk_size).index_tree()


@dataclass
class ReadResult:
    data: bytes
    size: int
    mtime: int
    start: int
    end: int


class Origin:
    """In-process origin service; :class:`OriginServer` puts it on the wire."""

    def __init__(self, config: OriginConfig, clock: Callable[[], float] = time.time, monitor=None):
        self.config = config
        self.prefix = config.namespace_prefix
        self.indexer = Indexer(config.root_dir, config.namespace_prefix, config.chunk_size, clock)
        self.state = IndexState(last_scan=0.0)
        self.monitor = monitor
        # test hook: (path, offset, data) -> data, applied to bytes leaving the origin
        self.mutator: Callable[[FederationPath, int, bytes], bytes] | None = None
        self._lock = threading.Lock()
        self._index_lock = threading.Lock()
        self.requests = 0
        self.bytes_served = 0

    def reindex(self, full: bool = False) -> IndexState:
        """Run one index pass and publish it; on I/O error the old state stays."""
        with self._index_lock:
            try:
                new = self.indexer.index_tree() if full or not self.state.catalog else self.indexer.refresh(self.state)
            except OSError:
                log.exception("index pass failed; keeping previous catalog")
                return self.state
            self.state = new
            return new

    def _local_path(self, path: FederationPath) -> str:
        if not path.is_under(self.prefix):
            raise NotFound(path)
        rel = path.relative_to(self.prefix)
        local = os.path.join(self.config.root_dir, *rel.split("/")) if rel else self.config.root_dir
        try:
            st = os.lstat(local)
        except OSError:
            raise NotFound(path) from None
        if not stat.S_ISREG(st.st_mode):
            raise NotFound(path)
        return local

    def stat(self, path: FederationPath) -> tuple[int, int]:
        st = os.stat(self._local_path(path))
        return st.st_size, int(st.st_mtime)

    def serve_read(self, path: str, range_: tuple[int, int] | None = None, client: tuple[str, int] = ("local", 4)) -> ReadResult:
        path = FederationPath(path)
        local = self._local_path(path)
        with open(local, "rb") as fh:
            st = os.fstat(fh.fileno())
            size = st.st_size
            if range_ is None:
                start, end = 0, size
            else:
                start, end = range_
                if start < 0 or end < start:
                    raise RangeUnsatisfiable(f"bad range {range_}")
                if start == end and start <= size:
                    end = start
                elif start >= size:
                    raise RangeUnsatisfiable(f"range start {start} >= size {size}")
                end = min(end, size)
            fh.seek(start)
            data = fh.read(end - start)
        fid = self.monitor.open(client[0], client[1], path, size) if self.monitor else None
        if self.mutator is not None:
            data = self.mutator(path, start, data)
        with self._lock:
            self.requests += 1
            self.bytes_served += len(data)
        if self.monitor:
            self.monitor.close(fid, bytes_read=len(data))
        return ReadResult(data, size, int(st.st_mtime), start, start + len(data))

    def handle_locate(self, path: str) -> bool:
        return FederationPath(path) in self.state.catalog

    def catalog_entry(self, path: str) -> FileCatalogEntry | None:
        return self.state.catalog.get(FederationPath(path))

    def stats(self) -> dict:
        with self._lock:
            return {"requests": self.requests, "bytes_served": self.bytes_served,
                    "files_indexed": len(self.state.catalog)}


class OriginHandler(wire.Handler):
    def _path(self) -> FederationPath:
        return normalize_path(wire.path_from_target(self.path))

    def do_HEAD(self) -> None:
        if not self.path.startswith("/data/"):
            self.send_error_text(404, "unknown endpoint")
            return
        try:
            size, mtime = self.service.stat(self._path())
        except (NotFound, MalformedPath):
            self.send_error_text(404, "not found")
            return
        self.send_response(200)
        self.send_header("Content-Length", str(size))
        self.send_header("X-Total-Size", str(size))
        self.send_header("X-Mtime", str(mtime))
        self.send_header("Accept-Ranges", "bytes")
        self.end_headers()

    def do_GET(self) -> None:
        url = urlsplit(self.path)
        origin: Origin = self.service
        if url.path.startswith("/data/"):
            self._get_data(origin)
        elif url.path == "/locate":
            path = parse_qs(url.query).get("path", [""])[0]
            try:
                has = origin.handle_locate(normalize_path(path))
            except MalformedPath:
                has = False
            self.send_bytes(200 if has else 404, b"")
        elif url.path == "/catalog":
            q = parse_qs(url.query).get("path")
            hdr = {"X-Chunk-Size": str(origin.config.chunk_size)}
            if q:
                try:
                    entry = origin.catalog_entry(normalize_path(q[0]))
                except MalformedPath:
                    entry = None
                if entry is None:
                    self.send_error_text(404, "not in catalog", hdr)
                    return
                body = (entry.to_json() + "\n").encode("utf-8")
            else:
                body = origin.state.catalog_text().encode("utf-8")
            self.send_bytes(200, body, hdr, content_type="application/x-ndjson")
        elif url.path == "/stats":
            self.send_json(200, origin.stats())
        else:
            self.send_error_text(404, "unknown endpoint")

    def _get_data(self, origin: Origin) -> None:
        try:
            path = self._path()
            size, _ = origin.stat(path)
            rng = wire.parse_range(self.headers.get("Range"), size)
        except (NotFound, MalformedPath):
            self.send_error_text(404, "not found")
            return
        except ValueError as exc:
            self.send_error_text(416, str(exc), {"Content-Range": f"bytes */{size}"})
            return
        host = self.client_address[0]
        try:
            res = origin.serve_read(path, rng, client=(host, 6 if ":" in host else 4))
        except NotFound:
            self.send_error_text(404, "not found")
            return
        except RangeUnsatisfiable as exc:
            self.send_error_text(416, str(exc))
            return
        headers = {"X-Total-Size": str(res.size), "X-Mtime": str(res.mtime), "Accept-Ranges": "bytes"}
        status = 200
        if rng is not None:
            status = 206
            headers["Content-Range"] = f"bytes {res.start}-{res.end - 1}/{res.size}"
        self.send_bytes(status, res.data, headers)


class OriginServer:
    """Origin on the wire: HTTP endpoints, periodic reindex, redirector heartbeats."""

    def __init__(self, config: OriginConfig, clock: Callable[[], float] = time.time, monitor=None):
        if monitor is None and config.monitor_endpoint:
            from .monitoring import ServerMonitor

            monitor = ServerMonitor(config.server_id, config.monitor_endpoint)
        self.origin = Origin(config, clock, monitor)
        self.http = wire.HTTPService(self.origin, OriginHandler, config.listen_endpoint)
        self._reindexer: wire.Heartbeat | None = None
        self._heartbeat: wire.Heartbeat | None = None

    @property
    def endpoint(self) -> str:
        return self.http.endpoint

    def register(self) -> None:
        for r in self.origin.config.redirector_endpoints:
            try:
                wire.post_json(r, "/register/origin", {"prefix": self.origin.prefix, "endpoint": self.endpoint})
            except OSError as exc:
                log.warning("registration with %s failed: %s", r, exc)

    def start(self) -> "OriginServer":
        self.origin.reindex(full=True)
        self.http.start()
        cfg = self.origin.config
        self._reindexer = wire.Heartbeat(self.origin.reindex, cfg.reindex_interval, "origin-reindex")
        self._heartbeat = wire.Heartbeat(self.register, cfg.heartbeat_interval, "origin-heartbeat")
        # reindexer's first tick runs immediately; the initial full scan already happened
        self._reindexer.start()
        self._heartbeat.start()
        return self

    def stop(self) -> None:
        for hb in (self._heartbeat, self._reindexer):
            if hb is not None:
                hb.stop()
        self.http.stop()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="stashfed-origin", description="Serve a namespace prefix from a local tree")
    parser.add_argument("--prefix", required=True, help="namespace prefix served, e.g. /exp1")
    parser.add_argument("--root", required=True, help="local directory exported under the prefix")
    parser.add_argument("--listen", default="127.0.0.1:8000")
    parser.add_argument("--redirector", default="", help="redirector endpoint(s), comma separated")
    parser.add_argument("--reindex-interval", type=float, default=30.0)
    parser.add_argument("--chunk-size", type=int, default=CHUNK_SIZE)
    parser.add_argument("--monitor", default=None, help="UDP host:port of the monitoring collector")
    parser.add_argument("--server-id", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    config = OriginConfig(
        namespace_prefix=normalize_path(args.prefix),
        root_dir=args.root,
        listen_endpoint=args.listen,
        redirector_endpoints=tuple(wire.split_endpoints(args.redirector)),
        reindex_interval=args.reindex_interval,
        chunk_size=args.chunk_size,
        monitor_endpoint=args.monitor,
        server_id=args.server_id,
    )
    server = OriginServer(config).start()
    log.info("origin %s serving %s from %s", server.endpoint, config.namespace_prefix, config.root_dir)
    wire.run_until_signalled(server.stop)


if __name__ == "__main__":
    main()
