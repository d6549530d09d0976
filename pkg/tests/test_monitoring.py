from __future__ import annotations

import json
import random
import socket
import threading
import time
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from monitor_oracle import malformed_datagrams, offline_join, record_key, synth_transfers

from stashfed import wire
from stashfed.errors import MalformedPacket, Unencodable
from stashfed.monitoring import (
    HEADER,
    MAX_PACKET,
    AuthMethod,
    Collector,
    CollectorServer,
    FileSink,
    Kind,
    MonitorEvent,
    RecordEmitter,
    ServerMonitor,
    TcpSink,
    decode_packet,
    encode_packet,
    parse_sink,
)

u32 = st.integers(1, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
text = st.text(max_size=80)
events = st.one_of(
    st.builds(MonitorEvent.login, u32, u64, u32, st.sampled_from(list(AuthMethod)), st.sampled_from([4, 6]), text),
    st.builds(MonitorEvent.open, u32, u64, u32, u32, u64, text),
    st.builds(MonitorEvent.close, u32, u64, u32, u64, u64, u32, u32),
)


class TestCodec:
    def test_login_layout(self):
        e = MonitorEvent.login(5, 1_700_000_000, 7, AuthMethod.HTTP, 4, "node1")
        pkt = encode_packet(e)
        assert pkt[:2] == b"SC" and pkt[2] == 1 and pkt[3] == 1 and pkt[4] == 0
        assert int.from_bytes(pkt[5:7], "big") == len(pkt) - 19
        assert int.from_bytes(pkt[7:11], "big") == 5
        assert int.from_bytes(pkt[11:19], "big") == 1_700_000_000
        assert pkt[19:] == (7).to_bytes(4, "big") + bytes([1, 4]) + (5).to_bytes(2, "big") + b"node1"
        assert decode_packet(pkt) == e

    def test_close_round_trip(self):
        e = MonitorEvent.close(1, 2, 9, 5797, 0, 3, 0)
        pkt = encode_packet(e)
        assert len(pkt) == 19 + 4 + 8 + 8 + 4 + 4
        assert decode_packet(pkt) == e

    def test_long_hostname_truncated(self):
        e = MonitorEvent.login(1, 2, 3, AuthMethod.NONE, 6, "h" * 600)
        pkt = encode_packet(e)
        assert len(pkt) == MAX_PACKET and pkt[4] & 1
        d = decode_packet(pkt)
        assert d.truncated and e.hostname.startswith(d.hostname) and len(d.hostname) == MAX_PACKET - 19 - 6 - 2

    def test_truncation_respects_code_points(self):
        e = MonitorEvent.open(1, 2, 3, 4, 5, "/" + "é" * 400)
        d = decode_packet(encode_packet(e))
        assert d.truncated and set(d.path[1:]) == {"é"}
        assert len(encode_packet(e)) <= MAX_PACKET

    def test_unencodable(self):
        with pytest.raises(Unencodable):
            encode_packet(MonitorEvent.open(1, 2, 3, 4, 5, "x" * (64 * 1024 + 1)))
        with pytest.raises(Unencodable):
            encode_packet(MonitorEvent.close(1, 2, 0, 0, 0, 0, 0))
        with pytest.raises(Unencodable):
            encode_packet(MonitorEvent(Kind.CLOSE, 1, 2, file_id=3))
        with pytest.raises(Unencodable):
            encode_packet(MonitorEvent.close(1, 2, 3, 2**64, 0, 0, 0))

    def test_malformed(self):
        pkt = encode_packet(MonitorEvent.close(1, 2, 9, 5797, 0, 3, 0))
        for bad in (b"XX" + pkt[2:], pkt[:-1], pkt[:10], b""):
            with pytest.raises(MalformedPacket):
                decode_packet(bad)

    @settings(max_examples=500)
    @given(events)
    def test_round_trip(self, e):
        d = decode_packet(encode_packet(e))
        if d.truncated and not e.truncated:
            field = "hostname" if e.kind == Kind.LOGIN else "path"
            assert getattr(e, field).startswith(getattr(d, field))
            assert replace(d, truncated=False, **{field: getattr(e, field)}) == e
        else:
            assert d == e

    @settings(max_examples=1000)
    @given(st.binary(max_size=600))
    def test_decode_total(self, blob):
        try:
            decode_packet(blob)
        except MalformedPacket:
            pass

    def test_malformed_generators_are_malformed(self):
        rng = random.Random(0)
        valid = [encode_packet(MonitorEvent.close(1, 2, 3, 4, 5, 6, 7)),
                 encode_packet(MonitorEvent.open(1, 2, 3, 4, 5, "/p")),
                 encode_packet(MonitorEvent.login(1, 2, 3, AuthMethod.HTTP, 4, "h"))]
        gen = malformed_datagrams(rng, valid)
        for _ in range(5000):
            _, blob = next(gen)
            with pytest.raises(MalformedPacket):
                decode_packet(blob)


def login(sid=1, uid=7, t=100):
    return MonitorEvent.login(sid, t, uid, AuthMethod.HTTP, 4, "node1")


def open_(sid=1, fid=9, uid=7, t=101):
    return MonitorEvent.open(sid, t, fid, uid, 5797, "/exp1/p1.bin")


def close(sid=1, fid=9, t=102, nbytes=5797):
    return MonitorEvent.close(sid, t, fid, nbytes, 0, 3, 0)


class TestCollector:
    def test_in_order(self):
        c = Collector()
        assert c.ingest(login(), now=0) == [] and c.ingest(open_(), now=0) == []
        (rec,) = c.ingest(close(), now=0)
        assert rec.complete and rec.path == "/exp1/p1.bin" and rec.hostname == "node1" and rec.bytes_read == 5797
        d = json.loads(rec.to_json())
        assert list(d) == ["server_id", "path", "file_size", "host", "auth", "ipv", "bytes_read", "bytes_written",
                           "read_ops", "write_ops", "open_ts", "close_ts", "complete"]
        assert d["auth"] == "http" and d["ipv"] == 4 and d["open_ts"] == 101

    def test_close_before_open(self):
        c = Collector()
        c.ingest(login(), now=0)
        assert c.ingest(close(), now=1) == []
        (rec,) = c.ingest(open_(), now=3)
        assert rec.complete

    def test_open_before_login(self):
        c = Collector()
        c.ingest(open_(), now=0)
        c.ingest(close(), now=0)
        (rec,) = c.ingest(login(), now=2)
        assert rec.complete

    def test_orphan_close_after_grace(self):
        c = Collector(grace=5)
        c.ingest(login(), now=0)
        assert c.ingest(close(), now=0) == []
        assert c.sweep(now=4.9) == []
        (rec,) = c.sweep(now=5.0)
        assert not rec.complete and rec.path is None
        assert c.counters["orphan_closes"] == 1
        # an open for an already-emitted transfer is ignored
        assert c.ingest(open_(), now=6) == []
        assert c.counters["late_opens"] == 1

    def test_duplicate_close_dropped(self):
        c = Collector()
        for e in (login(), open_(), close()):
            c.ingest(e, now=0)
        assert c.ingest(close(), now=1) == []
        assert c.counters["duplicate_ids"] == 1 and c.counters["emitted"] == 1

    def test_state_is_bounded(self):
        c = Collector(grace=5, login_ttl=100, open_ttl=200)
        for i in range(1, 200):
            c.ingest(login(uid=i), now=i)
            c.ingest(open_(fid=i, uid=i), now=i)
            if i % 2:
                c.ingest(close(fid=i), now=i)
        assert c.state_size() > 0
        c.sweep(now=10_000)
        assert c.state_size() == 0
        assert c.counters["orphan_opens"] == 99

    def test_ingest_auto_sweeps(self):
        c = Collector(grace=5)
        c.ingest(close(), now=0)
        out = c.ingest(login(uid=99), now=10)
        assert len(out) == 1 and not out[0].complete

    def test_matches_offline_join(self):
        w = synth_transfers(2000, seed=4, reorder=0.05, drop=0.02)
        c = Collector()
        got = []
        for t, pkt in w.packets:
            got.extend(r.to_dict() for r in c.ingest_datagram(pkt, now=t))
        got.extend(r.to_dict() for r in c.flush())
        want = offline_join(w.log)
        assert sorted(got, key=record_key) == sorted(want, key=record_key)
        assert w.dropped_opens > 0


class TestSinks:
    def test_file_sink_order(self, tmp_path):
        em = RecordEmitter(FileSink(str(tmp_path / "out.jsonl")))
        c = Collector()
        c.ingest(login(), now=0)
        for fid in range(1, 1001):
            c.ingest(open_(fid=fid), now=0)
        for fid in range(1000, 0, -1):
            for r in c.ingest(close(fid=fid, nbytes=fid), now=0):
                em.emit(r)
        lines = (tmp_path / "out.jsonl").read_text().splitlines()
        assert len(lines) == 1000 and em.delivered == 1000
        assert [json.loads(line)["bytes_read"] for line in lines] == list(range(1000, 0, -1))

    def test_tcp_outage_then_reconnect(self):
        srv = socket.socket()
        srv.bind(("127.0.0.1", 0))
        port = srv.getsockname()[1]
        srv.close()  # nothing listening yet
        em = RecordEmitter(TcpSink(f"127.0.0.1:{port}"), queue_bound=50)
        c = Collector()
        c.ingest(login(), now=0)
        recs = []
        for fid in range(1, 11):
            c.ingest(open_(fid=fid), now=0)
            recs.extend(c.ingest(close(fid=fid), now=0))
        for r in recs:
            em.emit(r)
        assert em.queued == 10 and em.delivered == 0
        lsock = socket.socket()
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lsock.bind(("127.0.0.1", port))
        lsock.listen()
        received = []

        def accept():
            conn, _ = lsock.accept()
            buf = b""
            while buf.count(b"\n") < 10:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buf += chunk
            received.extend(buf.decode().splitlines())
            conn.close()

        t = threading.Thread(target=accept)
        t.start()
        assert em.drain() == 10
        t.join(5)
        lsock.close()
        assert len(received) == 10 and em.queued == 0

    def test_queue_bound_drops(self):
        class Down:
            def write(self, lines):
                raise ConnectionRefusedError

        em = RecordEmitter(Down(), queue_bound=3)
        c = Collector()
        c.ingest(login(), now=0)
        for fid in range(1, 6):
            c.ingest(open_(fid=fid), now=0)
            for r in c.ingest(close(fid=fid), now=0):
                em.emit(r)
        assert em.queued == 3 and em.dropped == 2

    def test_parse_sink(self, tmp_path):
        assert isinstance(parse_sink(f"file:{tmp_path}/x"), FileSink)
        assert isinstance(parse_sink("tcp:127.0.0.1:9"), TcpSink)
        with pytest.raises(ValueError):
            parse_sink("kafka:x")


class TestEndToEnd:
    def test_cache_reports_transfers(self, small_bed, tmp_path):
        out = tmp_path / "records.jsonl"
        col = CollectorServer(FileSink(str(out)), listen="127.0.0.1:0", admin="127.0.0.1:0").start()
        try:
            origin = small_bed.add_origin("/exp1")
            with open(f"{origin.origin.config.root_dir}/f.bin", "wb") as fh:
                fh.write(b"x" * 3000)
            origin.origin.reindex()
            cache = small_bed.add_cache("c", monitor_endpoint=col.endpoint, server_id=42)
            r = wire.request(cache.endpoint, "GET", "/data/exp1/f.bin")
            assert r.status == 200
            deadline = time.time() + 5
            while time.time() < deadline and col.stats()["emitted"] < 1:
                time.sleep(0.05)
        finally:
            col.stop(flush=True)
        recs = [json.loads(line) for line in out.read_text().splitlines()]
        assert recs and recs[0]["server_id"] == 42 and recs[0]["complete"]
        assert recs[0]["path"] == "/exp1/f.bin" and recs[0]["bytes_read"] == 3000 and recs[0]["host"] == "127.0.0.1"

    def test_server_monitor_ids(self):
        rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        rx.bind(("127.0.0.1", 0))
        rx.settimeout(2)
        mon = ServerMonitor(3, "127.0.0.1:%d" % rx.getsockname()[1])
        fid = mon.open("h", 4, "/p", 10)
        mon.close(fid, bytes_read=10)
        kinds = [decode_packet(rx.recv(1024)).kind for _ in range(3)]
        assert kinds == [Kind.LOGIN, Kind.OPEN, Kind.CLOSE]
        rx.close()
        assert HEADER.size == 19
