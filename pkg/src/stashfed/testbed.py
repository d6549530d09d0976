"""Start a complete loopback federation inside one process."""

from __future__ import annotations

import os
import tempfile
from typing import Callable

from .cache import CacheConfig, CacheServer
from .client import ClientOptions
from .core import CHUNK_SIZE, GeoCoordinate, normalize_path
from .origin import OriginConfig, OriginServer
from .proxy import ProxyConfig, ProxyServer
from .redirector import RedirectorServer

DEFAULT_CACHE_CAPACITY = 256 * 2**20


class Testbed:
    """Owns every service it starts; ``stop()`` (or leaving the ``with``) tears all down.

    Registration is done synchronously on start so callers never race the
    first heartbeat.
    """

    __test__ = False  # not a pytest class despite the name

    def __init__(self, workdir: str | None = None, chunk_size: int = CHUNK_SIZE, heartbeat_interval: float = 60.0,
                 reindex_interval: float = 30.0):
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="stashfed-")
            workdir = self._tmp.name
        self.workdir = workdir
        self.chunk_size = chunk_size
        self.heartbeat_interval = heartbeat_interval
        self.reindex_interval = reindex_interval
        self.redirectors: list[RedirectorServer] = []
        self.origins: dict[str, OriginServer] = {}
        self.caches: dict[str, CacheServer] = {}
        self.proxies: list[ProxyServer] = []
        self._stopped: set[int] = set()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def redirector_endpoints(self) -> list[str]:
        return [r.endpoint for r in self.redirectors]

    def add_redirector(self, **kw) -> RedirectorServer:
        r = RedirectorServer(**kw).start()
        self.redirectors.append(r)
        return r

    def add_origin(self, prefix: str, root: str | None = None, clock: Callable[[], float] | None = None,
                   **kw) -> OriginServer:
        prefix = normalize_path(prefix)
        if root is None:
            root = os.path.join(self.workdir, "origins", prefix.strip("/").replace("/", "_") or "root")
        os.makedirs(root, exist_ok=True)
        cfg = OriginConfig(prefix, root, redirector_endpoints=tuple(self.redirector_endpoints),
                           reindex_interval=kw.pop("reindex_interval", self.reindex_interval),
                           heartbeat_interval=self.heartbeat_interval, chunk_size=self.chunk_size, **kw)
        server = OriginServer(cfg, **({"clock": clock} if clock else {})).start()
        server.register()
        self.origins[prefix] = server
        return server

    def add_cache(self, cache_id: str, location: GeoCoordinate | tuple[float, float] = (0.0, 0.0),
                  capacity: int = DEFAULT_CACHE_CAPACITY, **kw) -> CacheServer:
        if not isinstance(location, GeoCoordinate):
            location = GeoCoordinate(*location)
        storage = os.path.join(self.workdir, "caches", cache_id)
        os.makedirs(storage, exist_ok=True)
        cfg = CacheConfig(cache_id, storage, capacity, redirector_endpoints=tuple(self.redirector_endpoints),
                          location=location, heartbeat_interval=self.heartbeat_interval, **kw)
        server = CacheServer(cfg).start()
        server.register()
        self.caches[cache_id] = server
        return server

    def add_proxy(self, capacity: int, max_object_size: int, object_ttl: float = 300.0, **kw) -> ProxyServer:
        p = ProxyServer(ProxyConfig(capacity, max_object_size, object_ttl), **kw).start()
        self.proxies.append(p)
        return p

    def http_base(self, origin: OriginServer | None = None) -> str:
        origin = origin or next(iter(self.origins.values()))
        return f"http://{origin.endpoint}/data"

    def client_options(self, **kw) -> ClientOptions:
        kw.setdefault("redirectors", self.redirector_endpoints)
        if self.proxies and "proxy" not in kw:
            kw["proxy"] = self.proxies[0].endpoint
        if self.origins and "http_base" not in kw:
            kw["http_base"] = self.http_base()
        return ClientOptions(**kw)

    def stop_service(self, server) -> None:
        if id(server) not in self._stopped:
            self._stopped.add(id(server))
            server.stop()

    def stop(self) -> None:
        for s in [*self.caches.values(), *self.proxies, *self.origins.values(), *self.redirectors]:
            self.stop_service(s)
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None
