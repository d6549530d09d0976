from __future__ import annotations

import hashlib
import os
import threading
import time

import pytest
from conftest import FakeClock, write_file

from stashfed import wire
from stashfed.errors import NotFound, OriginUnreachable
from stashfed.proxy import HIT, MISS, UNCACHEABLE, ProxyCache, ProxyConfig, proxied_get


class Upstream:
    def __init__(self, objects: dict[str, bytes], delay: float = 0.0):
        self.objects = objects
        self.delay = delay
        self.calls = 0

    def __call__(self, url, timeout):
        self.calls += 1
        time.sleep(self.delay)
        if url not in self.objects:
            return 404, b""
        return 200, self.objects[url]


def make(capacity=1000, max_obj=100, ttl=300.0, objects=None, clock=None, delay=0.0):
    up = Upstream(objects or {}, delay)
    return ProxyCache(ProxyConfig(capacity, max_obj, ttl), clock or FakeClock(), up), up


class TestPolicies:
    def test_miss_then_hit(self):
        p, up = make(objects={"http://o/a": b"x" * 10})
        assert p.proxy_get("http://o/a") == (b"x" * 10, MISS)
        assert p.proxy_get("http://o/a") == (b"x" * 10, HIT)
        assert up.calls == 1

    def test_large_never_cached(self):
        big = os.urandom(101)
        p, up = make(objects={"http://o/big": big})
        for _ in range(3):
            assert p.proxy_get("http://o/big") == (big, UNCACHEABLE)
        assert up.calls == 3 and p.stats()["objects"] == 0 and p.usage == 0

    def test_ttl_expiry(self):
        clock = FakeClock()
        p, up = make(ttl=10, objects={"http://o/a": b"1"}, clock=clock)
        p.proxy_get("http://o/a")
        clock.advance(10)
        assert p.proxy_get("http://o/a")[1] == HIT
        clock.advance(0.5)
        assert p.proxy_get("http://o/a")[1] == MISS
        assert p.counters["expired"] == 1 and up.calls == 2

    def test_sweep(self):
        clock = FakeClock()
        objs = {f"http://o/{i}": bytes([i]) * 10 for i in range(5)}
        p, _ = make(ttl=10, objects=objs, clock=clock)
        for i in range(3):
            p.proxy_get(f"http://o/{i}")
        clock.advance(5)
        assert p.expire_sweep() == 0
        for i in range(3, 5):
            p.proxy_get(f"http://o/{i}")
        clock.advance(6)
        assert p.expire_sweep() == 3
        assert sorted(p.objects) == ["http://o/3", "http://o/4"]

    def test_capacity_lru_matches_sort_oracle(self):
        clock = FakeClock()
        objs = {f"http://o/{i}": bytes(90) for i in range(20)}
        p, _ = make(capacity=500, max_obj=100, objects=objs, clock=clock)
        order = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9]
        access: dict[str, float] = {}
        for i in order:
            clock.advance(1)
            url = f"http://o/{i}"
            p.proxy_get(url)
            access[url] = clock.now
            # oracle: most recent floor(500/90) urls survive
            keep = sorted(access, key=lambda u: (access[u], u))[-(500 // 90):]
            assert sorted(p.objects) == sorted(keep)
            assert p.usage <= 500

    def test_errors(self):
        p, _ = make()
        with pytest.raises(NotFound):
            p.proxy_get("http://o/none")

        def down(url, timeout):
            raise ConnectionRefusedError

        p.fetch = down
        with pytest.raises(OriginUnreachable):
            p.proxy_get("http://o/x")

    def test_config(self):
        with pytest.raises(ValueError):
            ProxyConfig(10, 11)

    def test_single_flight(self):
        p, up = make(objects={"http://o/a": b"abc"}, delay=0.05)
        out = []
        ts = [threading.Thread(target=lambda: out.append(p.proxy_get("http://o/a"))) for _ in range(8)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert up.calls == 1 and all(d == b"abc" for d, _ in out)


class TestWire:
    def test_forward_proxy(self, small_bed):
        origin = small_bed.add_origin("/exp1")
        small_data, big_data = os.urandom(500), os.urandom(5000)
        write_file(origin.origin.config.root_dir, "s.bin", small_data)
        write_file(origin.origin.config.root_dir, "b.bin", big_data)
        proxy = small_bed.add_proxy(capacity=10_000, max_object_size=1000)
        base = small_bed.http_base(origin)
        got = [proxied_get(proxy.endpoint, base + "/exp1/s.bin") for _ in range(2)]
        assert [s for _, s in got] == [MISS, HIT]
        got = [proxied_get(proxy.endpoint, base + "/exp1/b.bin") for _ in range(2)]
        assert [s for _, s in got] == [UNCACHEABLE, UNCACHEABLE]
        assert hashlib.sha256(got[0][0]).digest() == hashlib.sha256(big_data).digest()
        with pytest.raises(NotFound):
            proxied_get(proxy.endpoint, base + "/exp1/none")
        stats = wire.request(proxy.endpoint, "GET", "/stats").json()
        assert stats["hits"] == 1 and stats["uncacheable"] == 2 and stats["objects"] == 1
        assert wire.request(proxy.endpoint, "GET", "/other").status == 400
