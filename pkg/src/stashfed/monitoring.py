"""Binary UDP telemetry: packet codec, stateful join collector, JSON sinks.

Packet layout (all integers big-endian)::

    magic    2s   b"SC"
    kind     u8   1=login 2=open 3=close
    version  u8   1
    flags    u8   bit 0: a text field was truncated
    length   u16  payload bytes that follow the header
    server   u32
    time     u64  seconds since the epoch

    login:  user_id u32, auth u8, ip_version u8, hostname (u16 len + UTF-8)
    open:   file_id u32, user_id u32, file_size u64, path (u16 len + UTF-8)
    close:  file_id u32, bytes_read u64, bytes_written u64, read_ops u32, write_ops u32
"""

from __future__ import annotations

import argparse
import enum
import heapq
import itertools
import json
import logging
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable

from . import wire
from .errors import MalformedPacket, Unencodable

log = logging.getLogger(__name__)

MAGIC = b"SC"
VERSION = 1
FLAG_TRUNCATED = 0x01
MAX_PACKET = 512
MAX_TEXT = 64 * 1024
DEFAULT_PORT = 9930

HEADER = struct.Struct(">2sBBBHIQ")
LOGIN = struct.Struct(">IBB")
OPEN = struct.Struct(">IIQ")
CLOSE = struct.Struct(">IQQII")
TEXT_LEN = struct.Struct(">H")

GRACE_PERIOD = 5.0
LOGIN_TTL = 3600.0
OPEN_TTL = 24 * 3600.0

U32 = 2**32 - 1
U64 = 2**64 - 1


class Kind(enum.IntEnum):
    LOGIN = 1
    OPEN = 2
    CLOSE = 3


class AuthMethod(enum.IntEnum):
    NONE = 0
    HTTP = 1
    FEDERATION = 2


@dataclass(frozen=True)
class MonitorEvent:
    kind: Kind
    server_id: int
    timestamp: int
    user_id: int | None = None
    auth_method: AuthMethod | None = None
    ip_version: int | None = None
    hostname: str | None = None
    file_id: int | None = None
    file_size: int | None = None
    path: str | None = None
    bytes_read: int | None = None
    bytes_written: int | None = None
    read_ops: int | None = None
    write_ops: int | None = None
    truncated: bool = False

    @classmethod
    def login(cls, server_id: int, timestamp: int, user_id: int, auth_method: AuthMethod,
              ip_version: int, hostname: str) -> "MonitorEvent":
        return cls(Kind.LOGIN, server_id, timestamp, user_id=user_id, auth_method=AuthMethod(auth_method),
                   ip_version=ip_version, hostname=hostname)

    @classmethod
    def open(cls, server_id: int, timestamp: int, file_id: int, user_id: int, file_size: int,
             path: str) -> "MonitorEvent":
        return cls(Kind.OPEN, server_id, timestamp, user_id=user_id, file_id=file_id, file_size=file_size, path=path)

    @classmethod
    def close(cls, server_id: int, timestamp: int, file_id: int, bytes_read: int, bytes_written: int,
              read_ops: int, write_ops: int) -> "MonitorEvent":
        return cls(Kind.CLOSE, server_id, timestamp, file_id=file_id, bytes_read=bytes_read,
                   bytes_written=bytes_written, read_ops=read_ops, write_ops=write_ops)


_KIND_FIELDS = {
    Kind.LOGIN: ("user_id", "auth_method", "ip_version", "hostname"),
    Kind.OPEN: ("file_id", "user_id", "file_size", "path"),
    Kind.CLOSE: ("file_id", "bytes_read", "bytes_written", "read_ops", "write_ops"),
}
_ALL_FIELDS = {f for fields in _KIND_FIELDS.values() for f in fields}


def _check(event: MonitorEvent) -> None:
    try:
        kind = Kind(event.kind)
    except ValueError:
        raise Unencodable(f"unknown kind {event.kind!r}") from None
    wanted = _KIND_FIELDS[kind]
    for name in _ALL_FIELDS:
        value = getattr(event, name)
        if (name in wanted) != (value is not None):
            raise Unencodable(f"{kind.name.lower()} event field {name} must {'be set' if name in wanted else 'be empty'}")
    if not 0 < event.server_id <= U32:
        raise Unencodable("server_id must be a nonzero u32")
    if not 0 <= event.timestamp <= U64:
        raise Unencodable("timestamp must be a u64")
    for name in ("user_id", "file_id"):
        v = getattr(event, name)
        if v is not None and not 0 < v <= U32:
            raise Unencodable(f"{name} must be a nonzero u32")
    if kind is Kind.LOGIN and event.ip_version not in (4, 6):
        raise Unencodable("ip_version must be 4 or 6")
    if kind is Kind.CLOSE and event.truncated:
        raise Unencodable("close events have no text to truncate")


def _truncate_utf8(raw: bytes, limit: int) -> bytes:
    if len(raw) <= limit:
        return raw
    cut = raw[:limit]
    # back off to a code point boundary
    while cut and (cut[-1] & 0xC0) == 0x80:
        cut = cut[:-1]
    if cut and cut[-1] >= 0xC0:
        cut = cut[:-1]
    return cut


def encode_packet(event: MonitorEvent) -> bytes:
    _check(event)
    try:
        return _encode(event)
    except struct.error as exc:
        raise Unencodable(str(exc)) from None


def _encode(event: MonitorEvent) -> bytes:
    kind = Kind(event.kind)
    flags = FLAG_TRUNCATED if event.truncated else 0
    if kind is Kind.CLOSE:
        payload = CLOSE.pack(event.file_id, event.bytes_read, event.bytes_written, event.read_ops, event.write_ops)
    else:
        if kind is Kind.LOGIN:
            fixed = LOGIN.pack(event.user_id, AuthMethod(event.auth_method), event.ip_version)
            text = event.hostname
        else:
            fixed = OPEN.pack(event.file_id, event.user_id, event.file_size)
            text = event.path
        raw = text.encode("utf-8")
        if len(raw) > MAX_TEXT:
            raise Unencodable(f"text field of {len(raw)} bytes exceeds {MAX_TEXT}")
        room = MAX_PACKET - HEADER.size - len(fixed) - TEXT_LEN.size
        cut = _truncate_utf8(raw, room)
        if len(cut) != len(raw):
            flags |= FLAG_TRUNCATED
        payload = fixed + TEXT_LEN.pack(len(cut)) + cut
    return HEADER.pack(MAGIC, kind, VERSION, flags, len(payload), event.server_id, event.timestamp) + payload


def _read_text(buf: bytes, offset: int) -> tuple[str, int]:
    if len(buf) < offset + TEXT_LEN.size:
        raise MalformedPacket("short text length")
    (n,) = TEXT_LEN.unpack_from(buf, offset)
    offset += TEXT_LEN.size
    if len(buf) < offset + n:
        raise MalformedPacket("short text")
    try:
        return buf[offset : offset + n].decode("utf-8"), offset + n
    except UnicodeDecodeError:
        raise MalformedPacket("text is not UTF-8") from None


def decode_packet(data: bytes) -> MonitorEvent:
    if len(data) < HEADER.size:
        raise MalformedPacket("datagram shorter than header")
    magic, kind, version, flags, length, server_id, ts = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedPacket("bad magic")
    if version != VERSION:
        raise MalformedPacket(f"unsupported version {version}")
    if kind not in (1, 2, 3):
        raise MalformedPacket(f"bad kind {kind}")
    if flags & ~FLAG_TRUNCATED:
        raise MalformedPacket(f"unknown flags {flags:#x}")
    if length != len(data) - HEADER.size:
        raise MalformedPacket("payload length mismatch")
    if server_id == 0:
        raise MalformedPacket("zero server_id")
    body = data[HEADER.size :]
    truncated = bool(flags & FLAG_TRUNCATED)
    if kind == Kind.CLOSE:
        if truncated:
            raise MalformedPacket("close packets carry no text")
        if len(body) != CLOSE.size:
            raise MalformedPacket("bad close payload size")
        fid, br, bw, rops, wops = CLOSE.unpack(body)
        if fid == 0:
            raise MalformedPacket("zero file_id")
        return MonitorEvent.close(server_id, ts, fid, br, bw, rops, wops)
    if kind == Kind.LOGIN:
        if len(body) < LOGIN.size:
            raise MalformedPacket("short login payload")
        uid, auth, ipv = LOGIN.unpack_from(body)
        text, end = _read_text(body, LOGIN.size)
        if uid == 0 or auth > 2 or ipv not in (4, 6):
            raise MalformedPacket("bad login fields")
        event = MonitorEvent.login(server_id, ts, uid, AuthMethod(auth), ipv, text)
    else:
        if len(body) < OPEN.size:
            raise MalformedPacket("short open payload")
        fid, uid, size = OPEN.unpack_from(body)
        text, end = _read_text(body, OPEN.size)
        if fid == 0 or uid == 0:
            raise MalformedPacket("zero id")
        event = MonitorEvent.open(server_id, ts, fid, uid, size, text)
    if end != len(body):
        raise MalformedPacket("trailing bytes")
    return replace(event, truncated=truncated) if truncated else event


@dataclass(frozen=True)
class TransferRecord:
    server_id: int
    path: str | None
    file_size: int | None
    hostname: str | None
    auth_method: AuthMethod | None
    ip_version: int | None
    bytes_read: int
    bytes_written: int
    read_ops: int
    write_ops: int
    open_time: int | None
    close_time: int
    complete: bool

    def to_dict(self) -> dict:
        return {
            "server_id": self.server_id,
            "path": self.path,
            "file_size": self.file_size,
            "host": self.hostname,
            "auth": self.auth_method.name.lower() if self.auth_method is not None else None,
            "ipv": self.ip_version,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "read_ops": self.read_ops,
            "write_ops": self.write_ops,
            "open_ts": self.open_time,
            "close_ts": self.close_time,
            "complete": self.complete,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False)


def join_record(close: MonitorEvent, open_: MonitorEvent | None, login: MonitorEvent | None) -> TransferRecord:
    return TransferRecord(
        server_id=close.server_id,
        path=open_.path if open_ else None,
        file_size=open_.file_size if open_ else None,
        hostname=login.hostname if login else None,
        auth_method=login.auth_method if login else None,
        ip_version=login.ip_version if login else None,
        bytes_read=close.bytes_read,
        bytes_written=close.bytes_written,
        read_ops=close.read_ops,
        write_ops=close.write_ops,
        open_time=open_.timestamp if open_ else None,
        close_time=close.timestamp,
        complete=open_ is not None and login is not None,
    )


Key = tuple[int, int]


class Collector:
    """Joins login/open/close events into transfer records.

    Single-writer: one thread owns an instance. Closes wait up to ``grace``
    seconds (arrival clock) for a late open or login before being emitted
    incomplete. Every piece of state expires, so memory stays bounded by
    live sessions, live opens and the grace buffer.
    """

    def __init__(self, grace: float = GRACE_PERIOD, login_ttl: float = LOGIN_TTL, open_ttl: float = OPEN_TTL,
                 clock: Callable[[], float] = time.time, sweep_interval: float = 1.0):
        self.grace = grace
        self.login_ttl = login_ttl
        self.open_ttl = open_ttl
        self.clock = clock
        self.sweep_interval = sweep_interval
        self.logins: dict[Key, tuple[MonitorEvent, float]] = {}
        self.opens: dict[Key, tuple[MonitorEvent, float]] = {}
        self.pending: dict[Key, tuple[MonitorEvent, float]] = {}
        self.retired: dict[Key, float] = {}
        self._waiting_login: dict[Key, set[Key]] = {}
        self._expiry: list[tuple[float, int, str, Key]] = []
        self._seq = itertools.count()
        self._last_sweep = float("-inf")
        self.counters = {"events": 0, "malformed": 0, "emitted": 0, "orphan_closes": 0,
                         "orphan_opens": 0, "duplicate_ids": 0, "late_opens": 0}

    def _schedule(self, when: float, table: str, key: Key) -> None:
        heapq.heappush(self._expiry, (when, next(self._seq), table, key))

    def _now(self, now: float | None) -> float:
        return self.clock() if now is None else now

    def ingest_datagram(self, data: bytes, now: float | None = None) -> list[TransferRecord]:
        try:
            event = decode_packet(data)
        except MalformedPacket:
            self.counters["malformed"] += 1
            return []
        return self.ingest(event, now)

    def ingest(self, event: MonitorEvent, now: float | None = None) -> list[TransferRecord]:
        now = self._now(now)
        out: list[TransferRecord] = []
        if now - self._last_sweep >= self.sweep_interval:
            out.extend(self.sweep(now))
        self.counters["events"] += 1
        sid = event.server_id
        if event.kind == Kind.LOGIN:
            key = (sid, event.user_id)
            self.logins[key] = (event, now + self.login_ttl)
            self._schedule(now + self.login_ttl, "logins", key)
            for fkey in self._waiting_login.pop(key, ()):
                out.extend(self._try_join(fkey))
        elif event.kind == Kind.OPEN:
            key = (sid, event.file_id)
            if key in self.retired:
                self.counters["late_opens"] += 1
            elif key in self.opens:
                self.counters["duplicate_ids"] += 1
            else:
                self.opens[key] = (event, now + self.open_ttl)
                self._schedule(now + self.open_ttl, "opens", key)
                if key in self.pending:
                    out.extend(self._try_join(key))
        else:
            key = (sid, event.file_id)
            if key in self.retired or key in self.pending:
                self.counters["duplicate_ids"] += 1
            else:
                self.pending[key] = (event, now + self.grace)
                self._schedule(now + self.grace, "pending", key)
                out.extend(self._try_join(key))
        return out

    def _try_join(self, key: Key) -> list[TransferRecord]:
        close, _ = self.pending[key]
        opened = self.opens.get(key)
        if opened is None:
            return []
        open_ev = opened[0]
        lkey = (key[0], open_ev.user_id)
        login = self.logins.get(lkey)
        if login is None:
            self._waiting_login.setdefault(lkey, set()).add(key)
            return []
        return [self._emit(key, close, open_ev, login[0])]

    def _emit(self, key: Key, close: MonitorEvent, open_ev: MonitorEvent | None,
              login: MonitorEvent | None) -> TransferRecord:
        deadline = self.pending.pop(key)[1]
        self.opens.pop(key, None)
        if open_ev is not None:
            waiters = self._waiting_login.get((key[0], open_ev.user_id))
            if waiters is not None:
                waiters.discard(key)
                if not waiters:
                    del self._waiting_login[(key[0], open_ev.user_id)]
        retire_until = deadline + self.login_ttl
        self.retired[key] = retire_until
        self._schedule(retire_until, "retired", key)
        self.counters["emitted"] += 1
        return join_record(close, open_ev, login)

    def sweep(self, now: float | None = None) -> list[TransferRecord]:
        now = self._now(now)
        self._last_sweep = now
        out: list[TransferRecord] = []
        while self._expiry and self._expiry[0][0] <= now:
            when, _, table, key = heapq.heappop(self._expiry)
            if table == "pending":
                item = self.pending.get(key)
                if item is None or item[1] != when:
                    continue
                opened = self.opens.get(key)
                open_ev = opened[0] if opened else None
                login = self.logins.get((key[0], open_ev.user_id)) if open_ev else None
                self.counters["orphan_closes"] += 1
                out.append(self._emit(key, item[0], open_ev, login[0] if login else None))
            elif table == "opens":
                item = self.opens.get(key)
                if item is None or item[1] != when or key in self.pending:
                    continue
                del self.opens[key]
                self.counters["orphan_opens"] += 1
            elif table == "logins":
                item = self.logins.get(key)
                if item is not None and item[1] == when:
                    del self.logins[key]
            else:
                if self.retired.get(key) == when:
                    del self.retired[key]
        return out

    def flush(self) -> list[TransferRecord]:
        """Emit everything still waiting, as if the grace period had elapsed."""
        out: list[TransferRecord] = []
        for key in list(self.pending):
            close, _ = self.pending[key]
            opened = self.opens.get(key)
            open_ev = opened[0] if opened else None
            login = self.logins.get((key[0], open_ev.user_id)) if open_ev else None
            if login is None or open_ev is None:
                self.counters["orphan_closes"] += 1
            out.append(self._emit(key, close, open_ev, login[0] if login else None))
        return out

    def state_size(self) -> int:
        return len(self.logins) + len(self.opens) + len(self.pending) + len(self.retired)


class FileSink:
    def __init__(self, path: str):
        self.path = path

    def write(self, lines: list[str]) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.writelines(line + "\n" for line in lines)

    def close(self) -> None:
        pass


class TcpSink:
    """Newline-delimited JSON over TCP; reconnects lazily after failures."""

    def __init__(self, endpoint: str, timeout: float = 2.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def write(self, lines: list[str]) -> None:
        if self._sock is None:
            self._sock = socket.create_connection(wire.parse_endpoint(self.endpoint), timeout=self.timeout)
        try:
            self._sock.sendall("".join(line + "\n" for line in lines).encode("utf-8"))
        except OSError:
            self.close()
            raise

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def parse_sink(text: str):
    scheme, _, rest = text.partition(":")
    if scheme == "file" and rest:
        return FileSink(rest)
    if scheme == "tcp" and rest:
        wire.parse_endpoint(rest)
        return TcpSink(rest)
    raise ValueError(f"sink must be file:PATH or tcp:HOST:PORT, got {text!r}")


class RecordEmitter:
    """Bounded FIFO in front of a sink; records survive short sink outages."""

    def __init__(self, sink, queue_bound: int = 10_000):
        self.sink = sink
        self.queue_bound = queue_bound
        self._queue: deque[str] = deque()
        self._lock = threading.Lock()
        self.delivered = 0
        self.dropped = 0

    def emit(self, record: TransferRecord) -> None:
        with self._lock:
            if len(self._queue) >= self.queue_bound:
                self.dropped += 1
                return
            self._queue.append(record.to_json())
        self.drain()

    def drain(self) -> int:
        with self._lock:
            if not self._queue:
                return 0
            batch = list(self._queue)
            try:
                self.sink.write(batch)
            except OSError:
                return 0
            self._queue.clear()
            self.delivered += len(batch)
            return len(batch)

    @property
    def queued(self) -> int:
        return len(self._queue)


def _wrap_id(n: int) -> int:
    return (n - 1) % U32 + 1


class ServerMonitor:
    """Emits login/open/close packets for one server to a UDP collector."""

    def __init__(self, server_id: int, collector: str, auth: AuthMethod = AuthMethod.HTTP,
                 clock: Callable[[], float] = time.time, login_refresh: float = LOGIN_TTL / 2):
        self.server_id = server_id
        self.target = wire.parse_endpoint(collector)
        self.auth = auth
        self.clock = clock
        self.login_refresh = login_refresh
        self._sock = socket.socket(socket.AF_INET6 if ":" in self.target[0] else socket.AF_INET, socket.SOCK_DGRAM)
        self._lock = threading.Lock()
        self._users: dict[str, tuple[int, float]] = {}
        self._user_ids = itertools.count(1)
        self._file_ids = itertools.count(1)
        self.sent = 0

    def _send(self, event: MonitorEvent) -> None:
        try:
            self._sock.sendto(encode_packet(event), self.target)
            self.sent += 1
        except (OSError, Unencodable):
            log.debug("monitor packet not sent", exc_info=True)

    def _login(self, host: str, ip_version: int) -> int:
        now = self.clock()
        with self._lock:
            known = self._users.get(host)
            if known is not None and now - known[1] < self.login_refresh:
                return known[0]
            uid = known[0] if known else _wrap_id(next(self._user_ids))
            self._users[host] = (uid, now)
        self._send(MonitorEvent.login(self.server_id, int(now), uid, self.auth, ip_version, host))
        return uid

    def open(self, host: str, ip_version: int, path: str, file_size: int) -> int:
        uid = self._login(host, ip_version)
        with self._lock:
            fid = _wrap_id(next(self._file_ids))
        self._send(MonitorEvent.open(self.server_id, int(self.clock()), fid, uid, file_size, path))
        return fid

    def close(self, file_id: int, bytes_read: int = 0, bytes_written: int = 0, read_ops: int = 1,
              write_ops: int = 0) -> None:
        self._send(MonitorEvent.close(self.server_id, int(self.clock()), file_id, bytes_read, bytes_written,
                                      read_ops, write_ops))


class _AdminHandler(wire.Handler):
    def do_GET(self) -> None:
        if self.path == "/stats":
            self.send_json(200, self.service.stats())
        else:
            self.send_error_text(404, "unknown endpoint")


class CollectorServer:
    """UDP receiver + single ingest thread + sink emitter + admin /stats."""

    def __init__(self, sink, listen: str = f"127.0.0.1:{DEFAULT_PORT}", admin: str | None = None,
                 collector: Collector | None = None, queue_bound: int = 10_000):
        host, port = wire.parse_endpoint(listen)
        self.sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self.collector = collector or Collector()
        self.emitter = RecordEmitter(sink, queue_bound)
        self._inbox: queue.Queue[bytes] = queue.Queue()
        self._stop = threading.Event()
        self._threads = [threading.Thread(target=self._receive, name="collector-rx", daemon=True),
                         threading.Thread(target=self._ingest, name="collector-ingest", daemon=True)]
        self.admin = wire.HTTPService(self, _AdminHandler, admin) if admin else None
        self.received = 0

    @property
    def endpoint(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return wire.format_endpoint(host, port)

    def _receive(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            self.received += 1
            self._inbox.put(data)

    def _ingest(self) -> None:
        while not self._stop.is_set() or not self._inbox.empty():
            try:
                data = self._inbox.get(timeout=0.2)
                records = self.collector.ingest_datagram(data)
            except queue.Empty:
                records = self.collector.sweep()
            for rec in records:
                self.emitter.emit(rec)
            self.emitter.drain()

    def stats(self) -> dict:
        return {**self.collector.counters, "received": self.received, "delivered": self.emitter.delivered,
                "dropped": self.emitter.dropped, "queued": self.emitter.queued}

    def start(self) -> "CollectorServer":
        for t in self._threads:
            t.start()
        if self.admin:
            self.admin.start()
        return self

    def stop(self, flush: bool = True) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        if flush:
            for rec in self.collector.flush():
                self.emitter.emit(rec)
        self.sock.close()
        if self.admin:
            self.admin.stop()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="stashfed-collector", description="Monitoring packet collector")
    parser.add_argument("--listen", default=f"127.0.0.1:{DEFAULT_PORT}", help="UDP host:port")
    parser.add_argument("--sink", required=True, help="file:PATH or tcp:HOST:PORT")
    parser.add_argument("--admin", default=None, help="HTTP host:port for GET /stats")
    parser.add_argument("--grace", type=float, default=GRACE_PERIOD)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    server = CollectorServer(parse_sink(args.sink), args.listen, args.admin, Collector(grace=args.grace)).start()
    log.info("collector listening on udp %s", server.endpoint)
    wire.run_until_signalled(server.stop)


if __name__ == "__main__":
    main()
