"""``stashcp``: nearest-cache download with a three-method fallback chain.

Chain order, most featured first:

1. ``cache``  - nearest caches via the federation protocol, per-chunk verification
2. ``origin`` - redirector locate, then chunked reads straight from the origin
3. ``proxy``  - one plain whole-file GET through a forward HTTP proxy
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence
from urllib.parse import quote

from . import wire
from .core import (
    CHUNK_SIZE,
    FileCatalogEntry,
    GeoCoordinate,
    chunk_checksum,
    chunk_layout,
    haversine_km,
    iter_file_chunks,
    normalize_path,
)
from .errors import (
    AllMethodsFailed,
    DownloadFailed,
    DownloadIntegrityError,
    DownloadNotFound,
    IntegrityError,
    NoCaches,
    NotFound,
    OriginUnreachable,
    StashError,
)
from .redirector import CacheDescriptor, RedirectorClient

log = logging.getLogger(__name__)

METHOD_NAMES = {"cache": "cache-federation", "origin": "direct-origin", "proxy": "proxy-http"}
DEFAULT_METHODS = ("cache", "origin", "proxy")
LOCAL_CACHE_BYTES = 2**30


@dataclass
class Attempt:
    method: str
    endpoint: str | None
    outcome: str
    detail: str = ""
    chunk_index: int | None = None


@dataclass
class TransferReport:
    path: str
    bytes: int
    duration: float
    method_used: str
    cache_status: str | None = None
    attempts: list[Attempt] = field(default_factory=list)
    lookup_time: float = 0.0
    transfer_time: float = 0.0
    verified: bool = False
    destination: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ClientOptions:
    redirectors: Sequence[str] = ()
    caches: Sequence[str] = ()
    location: GeoCoordinate | None = None
    methods: Sequence[str] = DEFAULT_METHODS
    proxy: str | None = None
    http_base: str | None = None
    cache_attempts: int = 2
    concurrency: int = 4
    connect_timeout: float = 2.0
    stall_timeout: float = 60.0
    local_cache_dir: str | None = None
    local_cache_bytes: int = LOCAL_CACHE_BYTES


def select_nearest_cache(client_location: GeoCoordinate | None,
                         directory: Sequence[CacheDescriptor]) -> list[CacheDescriptor]:
    """Rank caches by great-circle distance; ties go to the smaller cache_id.

    Without a client location the order is by cache_id alone.
    """
    if not directory:
        raise NoCaches("cache directory is empty")
    if client_location is None:
        return sorted(directory, key=lambda c: c.cache_id)
    return sorted(directory, key=lambda c: (haversine_km(client_location, c.location), c.cache_id))


def verify_download(local_file: str, entry: FileCatalogEntry) -> bool:
    """Check size, then each chunk digest; raises IntegrityError on the first mismatch."""
    size = os.path.getsize(local_file)
    if size != entry.size:
        raise IntegrityError(f"size {size} != catalog size {entry.size}")
    with open(local_file, "rb") as fh:
        for idx, block in enumerate(iter_file_chunks(fh, entry.chunk_size)):
            if chunk_checksum(block, entry.chunk_size) != entry.chunk_digests[idx]:
                raise IntegrityError(f"chunk {idx} digest mismatch", chunk_index=idx)
    return True


class LocalChunkCache:
    """Content-addressed chunk store on the execute host, capped in bytes."""

    def __init__(self, directory: str, max_bytes: int = LOCAL_CACHE_BYTES):
        self.directory = directory
        self.max_bytes = max_bytes
        os.makedirs(directory, exist_ok=True)
        self._lock = threading.Lock()

    def _file(self, digest: bytes) -> str:
        return os.path.join(self.directory, digest.hex())

    def get(self, digest: bytes) -> bytes | None:
        try:
            with open(self._file(digest), "rb") as fh:
                data = fh.read()
        except OSError:
            return None
        if chunk_checksum(data, max(len(data), 1)) != digest:
            return None
        os.utime(self._file(digest))
        return data

    def put(self, digest: bytes, data: bytes) -> None:
        if len(data) > self.max_bytes:
            return
        with self._lock:
            tmp = self._file(digest) + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self._file(digest))
            self._trim()

    def _trim(self) -> None:
        files = []
        for de in os.scandir(self.directory):
            if de.is_file() and not de.name.endswith(".tmp"):
                st = de.stat()
                files.append((st.st_mtime, de.path, st.st_size))
        total = sum(f[2] for f in files)
        for _, p, n in sorted(files):
            if total <= self.max_bytes:
                break
            os.unlink(p)
            total -= n

    def usage(self) -> int:
        return sum(de.stat().st_size for de in os.scandir(self.directory) if de.is_file())


class _Failed(Exception):
    def __init__(self, outcome: str, detail: str = "", chunk_index: int | None = None):
        super().__init__(detail or outcome)
        self.outcome = outcome
        self.detail = detail
        self.chunk_index = chunk_index


def _aggregate_status(statuses: list[str]) -> str | None:
    seen = set(statuses)
    if not seen:
        return None
    if seen == {"HIT"}:
        return "HIT"
    if seen == {"MISS"}:
        return "MISS"
    return "PARTIAL"


def _error_from_response(resp: wire.Response, where: str) -> _Failed:
    kind = resp.header("X-Stash-Error")
    if resp.status == 404:
        return _Failed("not-found", where)
    if kind == "integrity":
        chunk = resp.header("X-Stash-Chunk")
        return _Failed("integrity-error", f"{where}: {resp.body[:200]!r}",
                       int(chunk) if chunk and chunk.isdigit() else None)
    return _Failed("unreachable", f"{where} answered {resp.status}")


class Downloader:
    """One ``download`` call; separated so tests can drive the pieces."""

    def __init__(self, options: ClientOptions | None = None):
        self.options = options or ClientOptions()
        self.redirectors = RedirectorClient(self.options.redirectors, timeout=self.options.connect_timeout)
        self.local = (LocalChunkCache(self.options.local_cache_dir, self.options.local_cache_bytes)
                      if self.options.local_cache_dir else None)

    # -- chunked transfer shared by methods 1 and 2 -----------------------

    def _fetch_chunks(self, endpoint: str, path: str, size: int, chunk_size: int,
                      digests: Sequence[bytes] | None, out_fd: int) -> list[str]:
        statuses: list[str] = []
        lock = threading.Lock()

        def one(spec) -> None:
            expected = digests[spec.index] if digests is not None else None
            if expected is not None and self.local is not None:
                data = self.local.get(expected)
                if data is not None and len(data) == spec.length:
                    os.pwrite(out_fd, data, spec.offset)
                    return
            try:
                resp = wire.request(endpoint, "GET", wire.data_target(path),
                                    headers={"Range": wire.range_header(spec.offset, spec.end)},
                                    timeout=self.options.stall_timeout)
            except OSError as exc:
                raise _Failed("unreachable", f"{endpoint}: {exc}") from exc
            if resp.status not in (200, 206):
                raise _error_from_response(resp, endpoint)
            data = resp.body
            if len(data) != spec.length:
                raise _Failed("integrity-error", f"chunk {spec.index}: {len(data)} bytes, expected {spec.length}",
                              spec.index)
            if expected is not None and chunk_checksum(data, chunk_size) != expected:
                raise _Failed("integrity-error", f"chunk {spec.index} digest mismatch", spec.index)
            os.pwrite(out_fd, data, spec.offset)
            if expected is not None and self.local is not None:
                self.local.put(expected, data)
            status = resp.header("X-Cache")
            if status:
                with lock:
                    statuses.append(status)

        layout = chunk_layout(size, chunk_size)
        if len(layout) <= 1 or self.options.concurrency <= 1:
            for spec in layout:
                one(spec)
        else:
            with ThreadPoolExecutor(max_workers=self.options.concurrency) as pool:
                failures = [f.exception() for f in [pool.submit(one, s) for s in layout]]
            errors = [e for e in failures if e is not None]
            if errors:
                # report the lowest failing chunk so the index is deterministic
                errs = [e for e in errors if isinstance(e, _Failed)]
                if not errs:
                    raise errors[0]
                integrity = [e for e in errs if e.outcome == "integrity-error"]
                pick = min(integrity or errs, key=lambda e: -1 if e.chunk_index is None else e.chunk_index)
                raise pick
        return statuses

    # -- methods ----------------------------------------------------------

    def _ranked_caches(self) -> list[str]:
        if self.options.caches:
            return list(self.options.caches)
        try:
            directory = self.redirectors.list_caches()
        except (OriginUnreachable, OSError) as exc:
            raise _Failed("redirector-unreachable", str(exc)) from exc
        try:
            return [c.endpoint for c in select_nearest_cache(self.options.location, directory)]
        except NoCaches as exc:
            raise _Failed("no-caches", str(exc)) from exc

    def _via_cache(self, endpoint: str, path: str, fd: int, timing: dict) -> tuple[str | None, FileCatalogEntry | None]:
        t0 = time.perf_counter()
        try:
            resp = wire.request(endpoint, "GET", wire.data_target(path, "/meta"), timeout=self.options.stall_timeout)
        except OSError as exc:
            raise _Failed("unreachable", f"{endpoint}: {exc}") from exc
        if resp.status != 200:
            raise _error_from_response(resp, endpoint)
        chunk_size = int(resp.header("X-Chunk-Size") or CHUNK_SIZE)
        meta = resp.json()
        entry = None
        if "chunks" in meta:
            entry = FileCatalogEntry(normalize_path(meta["path"]), int(meta["size"]), 0, 0,
                                     tuple(bytes.fromhex(h) for h in meta["chunks"]), chunk_size)
        timing["lookup"] += time.perf_counter() - t0
        statuses = self._fetch_chunks(endpoint, path, int(meta["size"]), chunk_size,
                                      entry.chunk_digests if entry else None, fd)
        status = _aggregate_status(statuses)
        if status is None and int(meta["size"]) == 0:
            status = resp.header("X-Cache")
        return status, entry

    def _origin_catalog(self, origin: str, path: str) -> tuple[FileCatalogEntry | None, int]:
        try:
            resp = wire.request(origin, "GET", "/catalog?path=" + quote(path, safe="/"),
                                timeout=self.options.connect_timeout)
        except OSError as exc:
            raise _Failed("unreachable", f"{origin}: {exc}") from exc
        chunk_size = int(resp.header("X-Chunk-Size") or CHUNK_SIZE)
        if resp.status != 200:
            return None, chunk_size
        return FileCatalogEntry.from_json(resp.body.decode("utf-8").strip(), chunk_size), chunk_size

    def _locate(self, path: str) -> str:
        try:
            return self.redirectors.locate(path)
        except NotFound as exc:
            raise _Failed("not-found", f"redirector: {exc}") from exc
        except (OriginUnreachable, OSError) as exc:
            raise _Failed("redirector-unreachable", str(exc)) from exc

    def _via_origin(self, path: str, fd: int, timing: dict) -> tuple[str, FileCatalogEntry | None]:
        t0 = time.perf_counter()
        origin = self._locate(path)
        entry, chunk_size = self._origin_catalog(origin, path)
        if entry is None:
            try:
                head = wire.request(origin, "HEAD", wire.data_target(path), timeout=self.options.connect_timeout)
            except OSError as exc:
                raise _Failed("unreachable", f"{origin}: {exc}") from exc
            if head.status != 200:
                raise _error_from_response(head, origin)
            size = int(head.header("X-Total-Size"))
        else:
            size = entry.size
        timing["lookup"] += time.perf_counter() - t0
        self._fetch_chunks(origin, path, size, chunk_size, entry.chunk_digests if entry else None, fd)
        return origin, entry

    def _via_proxy(self, path: str, fd: int) -> tuple[str, FileCatalogEntry | None]:
        opts = self.options
        url = opts.http_base.rstrip("/") + quote(path, safe="/")
        try:
            resp = wire.request(opts.proxy, "GET", url, timeout=opts.stall_timeout)
        except OSError as exc:
            raise _Failed("unreachable", f"proxy {opts.proxy}: {exc}") from exc
        if resp.status != 200:
            raise _error_from_response(resp, f"proxy {opts.proxy}")
        os.pwrite(fd, resp.body, 0)
        entry = None
        if opts.redirectors:
            try:
                entry, _ = self._origin_catalog(self._locate(path), path)
            except _Failed:
                entry = None
        return resp.header("X-Proxy-Cache") or "", entry

    # -- driver ------------------------------------------------------------

    def download(self, path: str, destination: str) -> TransferReport:
        fpath = normalize_path(path)
        if os.path.isdir(destination):
            destination = os.path.join(destination, fpath.rsplit("/", 1)[-1])
        dest_dir = os.path.dirname(os.path.abspath(destination))
        attempts: list[Attempt] = []
        timing = {"lookup": 0.0}
        started = time.perf_counter()
        opts = self.options

        for method in opts.methods:
            if method not in METHOD_NAMES:
                raise ValueError(f"unknown method {method!r}")
            if method == "proxy" and not (opts.proxy and opts.http_base):
                continue
            if method == "cache":
                t0 = time.perf_counter()
                try:
                    targets = self._ranked_caches()[: max(1, opts.cache_attempts)]
                except _Failed as f:
                    attempts.append(Attempt(METHOD_NAMES[method], None, f.outcome, f.detail))
                    continue
                finally:
                    timing["lookup"] += time.perf_counter() - t0
            elif method == "origin":
                targets = [None]
            else:
                targets = [opts.proxy]
            for target in targets:
                fd, tmp = tempfile.mkstemp(prefix=".stashcp-", dir=dest_dir)
                try:
                    try:
                        status: str | None = None
                        if method == "cache":
                            status, entry = self._via_cache(target, fpath, fd, timing)
                        elif method == "origin":
                            target, entry = self._via_origin(fpath, fd, timing)
                        else:
                            status, entry = self._via_proxy(fpath, fd)
                        os.close(fd)
                        fd = -1
                        if entry is not None:
                            try:
                                verify_download(tmp, entry)
                            except IntegrityError as exc:
                                raise _Failed("integrity-error", str(exc), exc.chunk_index) from exc
                    except _Failed as f:
                        attempts.append(Attempt(METHOD_NAMES[method], target, f.outcome, f.detail, f.chunk_index))
                        continue
                    os.replace(tmp, destination)
                    tmp = None
                    attempts.append(Attempt(METHOD_NAMES[method], target, "ok"))
                    duration = time.perf_counter() - started
                    return TransferReport(
                        path=fpath,
                        bytes=os.path.getsize(destination),
                        duration=duration,
                        method_used=METHOD_NAMES[method],
                        cache_status=status if method == "cache" else None,
                        attempts=attempts,
                        lookup_time=timing["lookup"],
                        transfer_time=duration - timing["lookup"],
                        verified=entry is not None,
                        destination=destination,
                    )
                finally:
                    if fd >= 0:
                        os.close(fd)
                    if tmp is not None and os.path.exists(tmp):
                        os.unlink(tmp)

        if not attempts:
            raise AllMethodsFailed(f"{fpath}: no applicable download method", attempts)
        if all(a.outcome == "not-found" for a in attempts):
            raise DownloadNotFound(f"{fpath}: not found", attempts)
        integrity = [a for a in attempts if a.outcome == "integrity-error"]
        if integrity:
            raise DownloadIntegrityError(f"{fpath}: integrity check failed", attempts, integrity[0].chunk_index)
        raise AllMethodsFailed(f"{fpath}: all methods failed", attempts)


def download(path: str, destination: str, options: ClientOptions | None = None) -> TransferReport:
    return Downloader(options).download(path, destination)


def _env(name: str, default=None):
    return os.environ.get("STASHCP_" + name, default)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stashcp", description="Copy a file out of the caching federation")
    p.add_argument("path", help="federation path, e.g. /exp1/data/file.bin")
    p.add_argument("dest", help="destination file or directory")
    p.add_argument("--redirectors", default=_env("REDIRECTORS", ""), help="H:P[,H:P]")
    p.add_argument("--caches", default=_env("CACHES", ""), help="explicit cache endpoints, in preference order")
    p.add_argument("--lat", type=float, default=_env("LAT"))
    p.add_argument("--lon", type=float, default=_env("LON"))
    p.add_argument("--methods", default=_env("METHODS", ",".join(DEFAULT_METHODS)))
    p.add_argument("--proxy", default=_env("PROXY"), help="forward proxy, e.g. http://host:3128")
    p.add_argument("--http-base", default=_env("HTTP_BASE"), help="upstream URL the proxy method fetches from")
    p.add_argument("--cache-attempts", type=int, default=int(_env("CACHE_ATTEMPTS", 2)))
    p.add_argument("--concurrency", type=int, default=int(_env("CONCURRENCY", 4)))
    p.add_argument("--local-cache", default=_env("LOCAL_CACHE"), help="client chunk cache directory (1 GB cap)")
    p.add_argument("--json-report", default=_env("JSON_REPORT"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    location = None
    if args.lat is not None and args.lon is not None:
        location = GeoCoordinate(float(args.lat), float(args.lon))
    options = ClientOptions(
        redirectors=wire.split_endpoints(args.redirectors),
        caches=wire.split_endpoints(args.caches),
        location=location,
        methods=tuple(m.strip() for m in args.methods.split(",") if m.strip()),
        proxy=args.proxy,
        http_base=args.http_base,
        cache_attempts=args.cache_attempts,
        concurrency=args.concurrency,
        local_cache_dir=args.local_cache,
    )
    try:
        report = download(args.path, args.dest, options)
    except DownloadFailed as exc:
        print(f"stashcp: {exc}", file=sys.stderr)
        for a in exc.attempts:
            print(f"  {a.method} {a.endpoint or '-'}: {a.outcome} {a.detail}", file=sys.stderr)
        if args.json_report:
            with open(args.json_report, "w") as fh:
                json.dump({"error": str(exc), "attempts": [dataclasses.asdict(a) for a in exc.attempts]}, fh, indent=2)
        return exc.exit_code
    except StashError as exc:
        print(f"stashcp: {exc}", file=sys.stderr)
        return 4
    if args.json_report:
        with open(args.json_report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
