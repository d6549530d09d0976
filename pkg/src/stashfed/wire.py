"""HTTP plumbing shared by the federation services and their clients."""

from __future__ import annotations

import http.client
import json
import logging
import re
import signal
import socket
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping
from urllib.parse import quote, unquote, urlsplit

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 2.0

_RANGE_RE = re.compile(r"^\s*bytes\s*=\s*(\d*)\s*-\s*(\d*)\s*$")


def parse_endpoint(text: str) -> tuple[str, int]:
    """Split ``host:port`` (IPv6 hosts in brackets)."""
    text = text.strip()
    if text.startswith("http://"):
        text = text[len("http://") :].rstrip("/")
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"malformed endpoint {text!r}, expected host:port")
    port_no = int(port)
    if not 0 <= port_no < 65536:
        raise ValueError(f"port out of range in {text!r}")
    return host.strip("[]"), port_no


def format_endpoint(host: str, port: int) -> str:
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


def split_endpoints(text: str | None) -> list[str]:
    if not text:
        return []
    return [e.strip() for e in text.split(",") if e.strip()]


def data_target(path: str, base: str = "/data") -> str:
    return base + quote(path, safe="/")


def path_from_target(target: str, base: str = "/data") -> str:
    return unquote(urlsplit(target).path[len(base) :])


def parse_range(header: str | None, size: int) -> tuple[int, int] | None:
    """Convert an HTTP ``Range`` header to a half-open interval.

    Returns None when the header is absent. Raises ValueError for syntax the
    servers do not support (multi-range) and for unsatisfiable ranges.
    """
    if not header:
        return None
    m = _RANGE_RE.match(header)
    if not m:
        raise ValueError(f"unsupported range {header!r}")
    first, last = m.group(1), m.group(2)
    if first == "":
        if last == "":
            raise ValueError("empty range spec")
        n = int(last)
        return max(0, size - n), size
    start = int(first)
    end = size if last == "" else min(int(last) + 1, size)
    if start >= size or end <= start:
        raise ValueError("unsatisfiable range")
    return start, end


def range_header(start: int, end: int) -> str:
    return f"bytes={start}-{end - 1}"


@dataclass
class Response:
    status: int
    headers: Mapping[str, str]
    body: bytes

    def json(self):
        return json.loads(self.body.decode("utf-8"))

    def header(self, name: str, default: str | None = None) -> str | None:
        for k, v in self.headers.items():
            if k.lower() == name.lower():
                return v
        return default


def request(
    endpoint: str,
    method: str,
    target: str,
    *,
    headers: Mapping[str, str] | None = None,
    body: bytes | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> Response:
    """One request on a fresh connection. Connection failures raise OSError."""
    host, port = parse_endpoint(endpoint)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request(method, target, body=body, headers=dict(headers or {}))
        resp = conn.getresponse()
        data = resp.read()
        return Response(resp.status, dict(resp.getheaders()), data)
    except http.client.HTTPException as exc:
        raise ConnectionError(f"{endpoint}: {exc}") from exc
    finally:
        conn.close()


def post_json(endpoint: str, target: str, payload, timeout: float = DEFAULT_TIMEOUT) -> Response:
    return request(
        endpoint,
        "POST",
        target,
        headers={"Content-Type": "application/json"},
        body=json.dumps(payload).encode("utf-8"),
        timeout=timeout,
    )


class Handler(BaseHTTPRequestHandler):
    """Request handler base with small response helpers.

    Subclasses reach their service object through ``self.server.service``.
    """

    protocol_version = "HTTP/1.0"
    server_version = "stashfed/0.1"

    @property
    def service(self):
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        log.debug("%s %s", self.address_string(), format % args)

    def read_body(self) -> bytes:
        n = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(n) if n else b""

    def read_json(self):
        return json.loads(self.read_body().decode("utf-8") or "null")

    def send_bytes(self, status: int, body: bytes, headers: Mapping[str, str] | None = None,
                   content_type: str = "application/octet-stream") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def send_json(self, status: int, payload, headers: Mapping[str, str] | None = None) -> None:
        body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        self.send_bytes(status, body, headers, content_type="application/json")

    def send_error_text(self, status: int, message: str, headers: Mapping[str, str] | None = None) -> None:
        self.send_bytes(status, message.encode("utf-8"), headers, content_type="text/plain; charset=utf-8")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128
    allow_reuse_address = True

    def handle_error(self, request, client_address) -> None:
        log.debug("connection error from %s", client_address, exc_info=True)


class _Server6(_Server):
    address_family = socket.AF_INET6


class HTTPService:
    """Runs ``handler_cls`` for ``service`` on a background thread."""

    def __init__(self, service, handler_cls: type[Handler], listen: str = "127.0.0.1:0"):
        host, port = parse_endpoint(listen)
        server_cls = _Server6 if ":" in host else _Server
        self.httpd = server_cls((host, port), handler_cls)
        self.httpd.service = service  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.httpd.server_address[:2]
        return format_endpoint(host, port)

    def start(self) -> "HTTPService":
        self._thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        name=f"http-{self.endpoint}", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class Heartbeat:
    """Calls ``fn`` now and then every ``interval`` seconds until stopped."""

    def __init__(self, fn, interval: float, name: str = "heartbeat"):
        self.fn = fn
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                self.fn()
            except Exception:  # keep beating through transient failures
                log.warning("heartbeat %s failed", self._thread.name, exc_info=True)
            self._stop.wait(self.interval)

    def start(self) -> "Heartbeat":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def run_until_signalled(stop: Callable[[], None]) -> None:
    """Block the main thread until SIGINT or SIGTERM, then call ``stop``."""
    done = threading.Event()

    def _handler(signum, frame) -> None:
        done.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, _handler)
    try:
        while not done.wait(3600):
            pass
    finally:
        stop()
