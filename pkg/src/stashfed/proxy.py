"""Caching forward proxy with the two site-proxy policies that matter here:
a maximum cacheable object size and a fixed object TTL."""

from __future__ import annotations

import argparse
import http.client
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable
from urllib.parse import urlsplit

from . import wire
from .errors import NotFound, OriginUnreachable

log = logging.getLogger(__name__)

HIT, MISS, UNCACHEABLE = "HIT", "MISS", "UNCACHEABLE"
DEFAULT_TTL = 300.0


@dataclass(frozen=True)
class ProxyConfig:
    capacity: int
    max_object_size: int
    object_ttl: float = DEFAULT_TTL
    listen_endpoint: str = "127.0.0.1:0"
    upstream_timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.max_object_size > self.capacity:
            raise ValueError("max_object_size must not exceed capacity")
        if self.object_ttl < 0:
            raise ValueError("object_ttl must be >= 0")


@dataclass
class StoredObject:
    url: str
    data: bytes
    fetched_at: float
    last_access: float


def http_fetch(url: str, timeout: float = 60.0) -> tuple[int, bytes]:
    parts = urlsplit(url)
    if parts.scheme != "http" or not parts.hostname:
        raise ValueError(f"only absolute http:// URLs are proxied, got {url!r}")
    conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
    target = parts.path or "/"
    if parts.query:
        target += "?" + parts.query
    try:
        conn.request("GET", target)
        resp = conn.getresponse()
        return resp.status, resp.read()
    except http.client.HTTPException as exc:
        raise ConnectionError(str(exc)) from exc
    finally:
        conn.close()


class ProxyCache:
    def __init__(self, config: ProxyConfig, clock: Callable[[], float] = time.time,
                 fetch: Callable[[str, float], tuple[int, bytes]] = http_fetch):
        self.config = config
        self.clock = clock
        self.fetch = fetch
        self.objects: dict[str, StoredObject] = {}
        self.usage = 0
        self._lock = threading.Lock()
        self._inflight: dict[str, Future] = {}
        self.counters = {"hits": 0, "misses": 0, "uncacheable": 0, "expired": 0, "evictions": 0,
                         "upstream_fetches": 0}

    def _drop(self, url: str) -> None:
        obj = self.objects.pop(url)
        self.usage -= len(obj.data)

    def proxy_get(self, url: str) -> tuple[bytes, str]:
        now = self.clock()
        with self._lock:
            obj = self.objects.get(url)
            if obj is not None:
                if now - obj.fetched_at <= self.config.object_ttl:
                    obj.last_access = now
                    self.counters["hits"] += 1
                    return obj.data, HIT
                self._drop(url)
                self.counters["expired"] += 1
            fut = self._inflight.get(url)
            leader = fut is None
            if leader:
                fut = self._inflight[url] = Future()
        if not leader:
            data, status = fut.result()
            return data, MISS if status == HIT else status
        try:
            data, status = self._fill(url)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        else:
            fut.set_result((data, status))
            return data, status
        finally:
            with self._lock:
                self._inflight.pop(url, None)

    def _fill(self, url: str) -> tuple[bytes, str]:
        with self._lock:
            self.counters["upstream_fetches"] += 1
        try:
            code, data = self.fetch(url, self.config.upstream_timeout)
        except OSError as exc:
            raise OriginUnreachable(f"upstream {url}: {exc}") from exc
        if code == 404:
            raise NotFound(url)
        if code != 200:
            raise OriginUnreachable(f"upstream {url} answered {code}")
        with self._lock:
            if len(data) > self.config.max_object_size:
                self.counters["uncacheable"] += 1
                return data, UNCACHEABLE
            now = self.clock()
            self.objects[url] = StoredObject(url, data, now, now)
            self.usage += len(data)
            self.counters["misses"] += 1
            self._enforce_capacity(keep=url)
        return data, MISS

    def _enforce_capacity(self, keep: str | None = None) -> int:
        evicted = 0
        if self.usage <= self.config.capacity:
            return 0
        for obj in sorted(self.objects.values(), key=lambda o: (o.last_access, o.url)):
            if self.usage <= self.config.capacity:
                break
            if obj.url == keep:
                continue
            self._drop(obj.url)
            evicted += 1
        self.counters["evictions"] += evicted
        return evicted

    def expire_sweep(self, now: float | None = None) -> int:
        """Delete objects past their TTL, then LRU-trim to capacity."""
        now = self.clock() if now is None else now
        with self._lock:
            stale = [u for u, o in self.objects.items() if now - o.fetched_at > self.config.object_ttl]
            for u in stale:
                self._drop(u)
            self.counters["expired"] += len(stale)
            return len(stale) + self._enforce_capacity()

    def stats(self) -> dict:
        with self._lock:
            return {**self.counters, "objects": len(self.objects), "usage_bytes": self.usage,
                    "capacity": self.config.capacity, "max_object_size": self.config.max_object_size,
                    "object_ttl": self.config.object_ttl}


class ProxyHandler(wire.Handler):
    def do_GET(self) -> None:
        proxy: ProxyCache = self.service
        if not self.path.startswith("http://"):
            if self.path == "/stats":
                self.send_json(200, proxy.stats())
            else:
                self.send_error_text(400, "absolute http:// URL required")
            return
        try:
            data, status = proxy.proxy_get(self.path)
        except NotFound:
            self.send_error_text(404, "upstream: not found")
            return
        except (OriginUnreachable, ValueError) as exc:
            self.send_error_text(502, str(exc))
            return
        self.send_bytes(200, data, {"X-Proxy-Cache": status})


class ProxyServer:
    def __init__(self, config: ProxyConfig, clock: Callable[[], float] = time.time, sweep_interval: float = 1.0):
        self.cache = ProxyCache(config, clock)
        self.http = wire.HTTPService(self.cache, ProxyHandler, config.listen_endpoint)
        self._sweeper = wire.Heartbeat(self.cache.expire_sweep, sweep_interval, "proxy-sweep")

    @property
    def endpoint(self) -> str:
        return self.http.endpoint

    def start(self) -> "ProxyServer":
        self.http.start()
        self._sweeper.start()
        return self

    def stop(self) -> None:
        self._sweeper.stop()
        self.http.stop()


def proxied_get(proxy: str, url: str, timeout: float = 60.0) -> tuple[bytes, str]:
    """Client side of the forward-proxy request form (curl -x)."""
    resp = wire.request(proxy, "GET", url, timeout=timeout)
    if resp.status == 404:
        raise NotFound(url)
    if resp.status != 200:
        raise OriginUnreachable(f"proxy answered {resp.status}")
    return resp.body, resp.header("X-Proxy-Cache") or ""


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="stashfed-proxy", description="Caching forward HTTP proxy")
    parser.add_argument("--listen", default="127.0.0.1:3128")
    parser.add_argument("--capacity", type=int, required=True, help="bytes")
    parser.add_argument("--max-object", type=int, required=True, help="largest cacheable object, bytes")
    parser.add_argument("--ttl", type=float, default=DEFAULT_TTL, help="object lifetime, seconds")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    server = ProxyServer(ProxyConfig(args.capacity, args.max_object, args.ttl, args.listen)).start()
    log.info("proxy listening on %s", server.endpoint)
    wire.run_until_signalled(server.stop)


if __name__ == "__main__":
    main()
