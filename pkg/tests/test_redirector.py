from __future__ import annotations

import os
import random

import pytest
from conftest import FakeClock, write_file

from stashfed import wire
from stashfed.core import GeoCoordinate, normalize_path
from stashfed.errors import Conflict, MalformedDescriptor, NotFound
from stashfed.redirector import HEARTBEAT_TTL, CacheDescriptor, Redirector, RedirectorClient, RedirectorServer


def brute_force_longest(registrations: dict[str, str], path: str, holds: set[tuple[str, str]]) -> str | None:
    """Try every registered prefix, keep those that textually prefix the path on
    a segment boundary and whose origin holds the file, return the longest."""
    best = None
    for prefix, ep in registrations.items():
        pseg = [s for s in prefix.split("/") if s]
        if [s for s in path.split("/") if s][: len(pseg)] != pseg:
            continue
        if (ep, path) not in holds:
            continue
        if best is None or len(pseg) > len([s for s in best[0].split("/") if s]):
            best = (prefix, ep)
    return best[1] if best else None


class TestLocate:
    def test_examples(self, clock):
        red = Redirector(clock=clock, confirm=lambda ep, p: True)
        red.register_origin("/exp1", "o1:1")
        assert red.locate("/exp1/a/f") == "o1:1"
        red.register_origin("/exp1/sub", "o2:1")
        assert red.locate("/exp1/sub/f") == "o2:1"
        assert red.locate("/exp1/subway/f") == "o1:1"
        with pytest.raises(NotFound):
            red.locate("/nowhere/f")

    def test_fallback_to_shorter_prefix_when_not_confirmed(self, clock):
        red = Redirector(clock=clock, confirm=lambda ep, p: ep == "o1:1")
        red.register_origin("/exp1", "o1:1")
        red.register_origin("/exp1/sub", "o2:1")
        assert red.locate("/exp1/sub/f") == "o1:1"
        assert red.confirm_calls == 2

    def test_registration_rules(self, clock):
        red = Redirector(clock=clock)
        red.register_origin("/exp1", "o1:1")
        red.register_origin("/exp1", "o1:1")
        assert len(red.registrations()) == 1
        with pytest.raises(Conflict):
            red.register_origin("/exp1", "o2:1")
        # a holder that stopped heartbeating may be replaced
        clock.advance(HEARTBEAT_TTL + 1)
        red.register_origin("/exp1", "o2:1")
        assert red.registrations()[0].endpoint == "o2:1"

    def test_stale_origin_never_returned(self, clock):
        red = Redirector(clock=clock, confirm=lambda ep, p: True)
        red.register_origin("/exp1", "o1:1")
        clock.advance(HEARTBEAT_TTL)
        assert red.locate("/exp1/x") == "o1:1"
        clock.advance(0.001)
        with pytest.raises(NotFound):
            red.locate("/exp1/x")
        assert red.confirm_calls == 1

    @pytest.mark.parametrize("seed", range(30))
    def test_longest_prefix_against_brute_force(self, seed):
        rng = random.Random(seed)
        words = ["a", "b", "ab", "c"]

        def rand_path(depth):
            return "/" + "/".join(rng.choice(words) for _ in range(depth))

        regs = {}
        for i in range(rng.randint(1, 8)):
            regs.setdefault(normalize_path(rand_path(rng.randint(0, 3))), f"o{i}:1")
        paths = [normalize_path(rand_path(rng.randint(1, 5))) for _ in range(40)]
        holds = {(ep, p) for ep in regs.values() for p in paths if rng.random() < 0.6}
        contacted: list[str] = []

        def confirm(ep, p):
            contacted.append(ep)
            return (ep, p) in holds

        red = Redirector(clock=FakeClock(), confirm=confirm)
        for prefix, ep in regs.items():
            red.register_origin(prefix, ep)
        for p in paths:
            contacted.clear()
            want = brute_force_longest(regs, p, holds)
            if want is None:
                with pytest.raises(NotFound):
                    red.locate(p)
            else:
                assert red.locate(p) == want
            # fan-out bound: only matching prefixes are ever asked
            matching = {ep for pre, ep in regs.items() if p.is_under(pre)}
            assert set(contacted) <= matching


class TestCaches:
    def test_directory(self):
        red = Redirector()
        assert red.list_caches() == []
        for i in range(9):
            red.register_cache({"cache_id": f"c{i}", "endpoint": f"h{i}:1", "location": [40, -90 + i]})
        red.register_cache({"cache_id": "c0", "endpoint": "new:2", "location": [40, -90]})
        caches = red.list_caches()
        assert len(caches) == 9 and len({c.cache_id for c in caches}) == 9
        assert {c.endpoint for c in caches if c.cache_id == "c0"} == {"new:2"}

    @pytest.mark.parametrize("bad", [
        {"cache_id": "x", "endpoint": "h:1", "location": [99, 0]},
        {"cache_id": "", "endpoint": "h:1", "location": [0, 0]},
        {"cache_id": "x", "endpoint": "nope", "location": [0, 0]},
        {"endpoint": "h:1", "location": [0, 0]},
    ])
    def test_malformed(self, bad):
        with pytest.raises(MalformedDescriptor):
            Redirector().register_cache(bad)

    def test_descriptor_round_trip(self):
        d = CacheDescriptor("c", "h:1", GeoCoordinate(1.5, 2.5))
        assert CacheDescriptor.from_dict(d.to_dict()) == d


class TestWire:
    def test_http_api(self):
        srv = RedirectorServer().start()
        try:
            ep = srv.endpoint
            srv.redirector.confirm = lambda e, p: True
            assert wire.post_json(ep, "/register/origin", {"prefix": "/exp1", "endpoint": "o1:9"}).status == 200
            assert wire.post_json(ep, "/register/origin", {"prefix": "/exp1", "endpoint": "o2:9"}).status == 409
            assert wire.post_json(ep, "/register/cache",
                                  {"cache_id": "c", "endpoint": "h:1", "location": [99, 0]}).status == 400
            assert wire.post_json(ep, "/register/cache",
                                  {"cache_id": "c", "endpoint": "h:1", "location": [9, 0]}).status == 200
            r = wire.request(ep, "GET", "/locate?path=/exp1/f")
            assert r.status == 200 and r.json() == {"origin": "o1:9"}
            assert wire.request(ep, "GET", "/locate?path=/zzz").status == 404
            assert [c["cache_id"] for c in wire.request(ep, "GET", "/caches").json()] == ["c"]
        finally:
            srv.stop()

    def test_confirms_against_real_origins(self, small_bed):
        o1 = small_bed.add_origin("/exp1")
        o2 = small_bed.add_origin("/exp1/sub")
        write_file(o1.origin.config.root_dir, "a/f", b"1")
        write_file(o1.origin.config.root_dir, "sub/only-in-o1", b"1")
        write_file(o2.origin.config.root_dir, "f", b"2")
        o1.origin.reindex()
        o2.origin.reindex()
        client = RedirectorClient(small_bed.redirector_endpoints)
        assert client.locate("/exp1/a/f") == o1.endpoint
        assert client.locate("/exp1/sub/f") == o2.endpoint
        assert client.locate("/exp1/sub/only-in-o1") == o1.endpoint
        with pytest.raises(NotFound):
            client.locate("/exp1/none")

    def test_high_availability_replay_and_failover(self):
        a, b = RedirectorServer().start(), RedirectorServer().start()
        try:
            for srv in (a, b):
                srv.redirector.confirm = lambda e, p: e != "o3:1"
            rng = random.Random(5)
            stream = [("/exp%d" % rng.randint(0, 3) + rng.choice(["", "/sub"]), f"o{rng.randint(0, 3)}:1")
                      for _ in range(30)]
            for prefix, ep in stream:
                codes = {wire.post_json(s.endpoint, "/register/origin", {"prefix": prefix, "endpoint": ep}).status
                         for s in (a, b)}
                assert len(codes) == 1
            probes = [f"/exp{i}{s}/f" for i in range(4) for s in ("", "/sub", "/other")]
            for p in probes:
                ra = wire.request(a.endpoint, "GET", "/locate?path=" + p)
                rb = wire.request(b.endpoint, "GET", "/locate?path=" + p)
                assert (ra.status, ra.body) == (rb.status, rb.body)
            expected = {p: RedirectorClient([a.endpoint]).locate(p) for p in probes
                        if wire.request(a.endpoint, "GET", "/locate?path=" + p).status == 200}
            a.stop()
            client = RedirectorClient([a.endpoint, b.endpoint])
            for p, ep in expected.items():
                assert client.locate(p) == ep
        finally:
            a.stop()
            b.stop()
