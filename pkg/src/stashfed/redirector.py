"""Discovery service: namespace-prefix registry, locate, and cache directory."""

from __future__ import annotations

import argparse
import logging
import threading
import time
from dataclasses import asdict, dataclass
from types import MappingProxyType
from typing import Callable, Iterable, Mapping
from urllib.parse import parse_qs, quote, urlsplit

from . import wire
from .core import FederationPath, GeoCoordinate, normalize_path
from .errors import Conflict, MalformedDescriptor, MalformedPath, NotFound, OriginUnreachable

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 60.0
HEARTBEAT_TTL = 3 * HEARTBEAT_INTERVAL
CONFIRM_TIMEOUT = 2.0


@dataclass(frozen=True)
class OriginRegistration:
    prefix: FederationPath
    endpoint: str
    last_heartbeat: float


@dataclass(frozen=True)
class CacheDescriptor:
    cache_id: str
    endpoint: str
    location: GeoCoordinate

    @classmethod
    def from_dict(cls, obj) -> "CacheDescriptor":
        try:
            loc = obj["location"]
            if isinstance(loc, dict):
                coord = GeoCoordinate(loc["latitude"], loc["longitude"])
            else:
                coord = GeoCoordinate(*loc)
            cache_id = str(obj["cache_id"])
            endpoint = str(obj["endpoint"])
            if not cache_id:
                raise ValueError("empty cache_id")
            wire.parse_endpoint(endpoint)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDescriptor(f"bad cache descriptor {obj!r}: {exc}") from exc
        return cls(cache_id, endpoint, coord)

    def to_dict(self) -> dict:
        return asdict(self)


def prefix_matches(prefix: str, path: FederationPath) -> bool:
    return path.is_under(prefix)


def http_confirm(endpoint: str, path: FederationPath, timeout: float = CONFIRM_TIMEOUT) -> bool:
    """Ask an origin whether it holds ``path``; unreachable counts as has-not."""
    try:
        resp = wire.request(endpoint, "GET", "/locate?path=" + quote(path, safe="/"), timeout=timeout)
    except OSError:
        return False
    return resp.status == 200


@dataclass(frozen=True)
class _Snapshot:
    origins: Mapping[FederationPath, OriginRegistration]
    caches: Mapping[str, CacheDescriptor]


class Redirector:
    """Registry state and locate logic.

    Readers use an immutable snapshot; writers serialize on a lock and
    publish a fresh snapshot.
    """

    def __init__(self, heartbeat_ttl: float = HEARTBEAT_TTL, clock: Callable[[], float] = time.time,
                 confirm: Callable[[str, FederationPath], bool] = http_confirm):
        self.heartbeat_ttl = heartbeat_ttl
        self.clock = clock
        self.confirm = confirm
        self._lock = threading.Lock()
        self._snap = _Snapshot(MappingProxyType({}), MappingProxyType({}))
        self.confirm_calls = 0

    def _is_live(self, reg: OriginRegistration, now: float) -> bool:
        return now - reg.last_heartbeat <= self.heartbeat_ttl

    def register_origin(self, prefix: str, endpoint: str) -> None:
        prefix = FederationPath(prefix)
        wire.parse_endpoint(endpoint)
        with self._lock:
            now = self.clock()
            snap = self._snap
            held = snap.origins.get(prefix)
            if held is not None and held.endpoint != endpoint and self._is_live(held, now):
                raise Conflict(f"{prefix} is held by {held.endpoint}")
            origins = dict(snap.origins)
            origins[prefix] = OriginRegistration(prefix, endpoint, now)
            self._snap = _Snapshot(MappingProxyType(origins), snap.caches)

    def register_cache(self, descriptor: CacheDescriptor | dict) -> None:
        if not isinstance(descriptor, CacheDescriptor):
            descriptor = CacheDescriptor.from_dict(descriptor)
        with self._lock:
            caches = dict(self._snap.caches)
            caches[descriptor.cache_id] = descriptor
            self._snap = _Snapshot(self._snap.origins, MappingProxyType(caches))

    def list_caches(self) -> list[CacheDescriptor]:
        return list(self._snap.caches.values())

    def registrations(self) -> list[OriginRegistration]:
        return list(self._snap.origins.values())

    def candidates(self, path: FederationPath) -> list[OriginRegistration]:
        """Live registrations whose prefix matches ``path``, longest prefix first."""
        now = self.clock()
        found = [r for r in self._snap.origins.values() if self._is_live(r, now) and path.is_under(r.prefix)]
        found.sort(key=lambda r: len(r.prefix.segments), reverse=True)
        return found

    def locate(self, path: str) -> str:
        path = FederationPath(path)
        for reg in self.candidates(path):
            self.confirm_calls += 1
            if self.confirm(reg.endpoint, path):
                return reg.endpoint
        raise NotFound(path)


class RedirectorHandler(wire.Handler):
    def do_GET(self) -> None:
        url = urlsplit(self.path)
        red: Redirector = self.service
        if url.path == "/locate":
            raw = parse_qs(url.query).get("path", [""])[0]
            try:
                endpoint = red.locate(normalize_path(raw))
            except (NotFound, MalformedPath):
                self.send_json(404, {"error": "not-found"})
                return
            self.send_json(200, {"origin": endpoint})
        elif url.path == "/caches":
            self.send_json(200, [c.to_dict() for c in red.list_caches()])
        elif url.path == "/origins":
            self.send_json(200, [{"prefix": r.prefix, "endpoint": r.endpoint,
                                  "last_heartbeat": r.last_heartbeat} for r in red.registrations()])
        else:
            self.send_error_text(404, "unknown endpoint")

    def do_POST(self) -> None:
        red: Redirector = self.service
        try:
            body = self.read_json()
        except ValueError:
            self.send_json(400, {"error": "bad json"})
            return
        try:
            if self.path == "/register/origin":
                red.register_origin(normalize_path(body["prefix"]), body["endpoint"])
            elif self.path == "/register/cache":
                red.register_cache(body)
            else:
                self.send_error_text(404, "unknown endpoint")
                return
        except Conflict as exc:
            self.send_json(409, {"error": "conflict", "detail": str(exc)})
            return
        except (MalformedDescriptor, MalformedPath, KeyError, TypeError, ValueError) as exc:
            self.send_json(400, {"error": "malformed", "detail": str(exc)})
            return
        self.send_json(200, {"ack": True})


class RedirectorClient:
    """Talks to an ordered list of redirectors, failing over on connection errors.

    A 404 from any redirector is authoritative and is not retried elsewhere.
    """

    def __init__(self, endpoints: Iterable[str], timeout: float = wire.DEFAULT_TIMEOUT):
        self.endpoints = list(endpoints)
        self.timeout = timeout

    def _get(self, target: str) -> wire.Response:
        last: Exception | None = None
        for ep in self.endpoints:
            try:
                return wire.request(ep, "GET", target, timeout=self.timeout)
            except OSError as exc:
                last = exc
        raise OriginUnreachable(f"no redirector reachable ({last})")

    def locate(self, path: str) -> str:
        resp = self._get("/locate?path=" + quote(path, safe="/"))
        if resp.status == 404:
            raise NotFound(path)
        if resp.status != 200:
            raise OriginUnreachable(f"redirector answered {resp.status}")
        return resp.json()["origin"]

    def list_caches(self) -> list[CacheDescriptor]:
        resp = self._get("/caches")
        if resp.status != 200:
            raise OriginUnreachable(f"redirector answered {resp.status}")
        return [CacheDescriptor.from_dict(d) for d in resp.json()]


class RedirectorServer:
    def __init__(self, listen: str = "127.0.0.1:0", heartbeat_ttl: float = HEARTBEAT_TTL,
                 clock: Callable[[], float] = time.time):
        self.redirector = Redirector(heartbeat_ttl, clock)
        self.http = wire.HTTPService(self.redirector, RedirectorHandler, listen)

    @property
    def endpoint(self) -> str:
        return self.http.endpoint

    def start(self) -> "RedirectorServer":
        self.http.start()
        return self

    def stop(self) -> None:
        self.http.stop()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="stashfed-redirector", description="Federation discovery service")
    parser.add_argument("--listen", default="127.0.0.1:1094")
    parser.add_argument("--heartbeat-ttl", type=float, default=HEARTBEAT_TTL)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    server = RedirectorServer(args.listen, args.heartbeat_ttl).start()
    log.info("redirector listening on %s", server.endpoint)
    wire.run_until_signalled(server.stop)


if __name__ == "__main__":
    main()
