from __future__ import annotations

import hashlib
import os
import random
import threading
import time

import pytest
from cachetools_oracle import expected_eviction
from conftest import write_file

from stashfed import wire
from stashfed.cache import HIT, MISS, PARTIAL, CacheConfig, CacheEntry, SpaceManager
from stashfed.core import CHUNK_SIZE, chunk_count, normalize_path
from stashfed.errors import CacheFull, IntegrityError, NotFound

MB = 10**6


def entry(path: str, stored: int, last: float, pinned: bool = False) -> CacheEntry:
    e = CacheEntry(normalize_path(path), stored, last_access=last, in_use=int(pinned), bytes_stored=stored)
    return e


def manager_with(entries, capacity=100 * MB, high=0.9, low=0.7) -> SpaceManager:
    sm = SpaceManager(capacity, high, low)
    for e in entries:
        sm.entries[e.path] = e
        sm.usage += e.bytes_stored
    return sm


class TestSpaceManager:
    def test_watermark_example(self):
        # 85 MB used, 10 MB incoming on a 100 MB cache -> down to at most 70 MB
        sm = manager_with([entry(f"/f{i}", 5 * MB, i) for i in range(17)])
        freed = sm.evict(10 * MB)
        assert sm.usage <= 70 * MB and sm.usage > 65 * MB
        assert freed == 85 * MB - sm.usage
        assert [e.path for e in sm.last_batch] == ["/f0", "/f1", "/f2"]

    def test_all_pinned_is_full(self):
        sm = manager_with([entry(f"/f{i}", 10 * MB, i, pinned=True) for i in range(9)])
        with pytest.raises(CacheFull):
            sm.reserve(entry("/new", 0, 99), 5 * MB)
        assert sm.usage == 90 * MB

    def test_reserve_only_evicts_above_high(self):
        sm = manager_with([entry("/a", 80 * MB, 1)])
        sm.reserve(entry("/b", 0, 2), 10 * MB)
        assert sm.evictions == 0 and sm.usage == 90 * MB
        sm.reserve(sm.entries["/b"], 1)
        assert [e.path for e in sm.last_batch] == ["/a"]

    def test_entry_being_fetched_is_never_evicted(self):
        sm = manager_with([entry("/old", 50 * MB, 0), entry("/cur", 39 * MB, 1)])
        cur = sm.entries["/cur"]
        sm.reserve(cur, 5 * MB)
        assert "/cur" in sm.entries and "/old" not in sm.entries

    @pytest.mark.parametrize("seed", range(50))
    def test_batches_match_sort_oracle(self, seed):
        rng = random.Random(seed)
        cap = 64 * 2**20
        sm = SpaceManager(cap, 0.9, 0.7)
        live: dict[str, CacheEntry] = {}
        clock = 0.0
        for _ in range(200):
            clock += rng.random()
            name = f"/f{rng.randrange(40)}"
            e = sm.entries.get(name) or live.get(name) or entry(name, 0, clock)
            e.last_access = clock
            for other in sm.entries.values():
                if other is not e and rng.random() < 0.05:
                    other.in_use = 1 - other.in_use
            n = rng.randint(1, 8 * 2**20)
            snapshot = [(x.path, x.last_access, x.bytes_stored, x.in_use > 0) for x in sm.entries.values()]
            usage = sm.usage
            try:
                sm.reserve(e, n)
            except CacheFull:
                pass
            if usage + n > sm.high_bytes:
                want = expected_eviction(snapshot, usage, n, cap, 0.7, exclude=e.path)
                assert [x.path for x in sm.last_batch] == want
            else:
                assert sm.last_batch == []
            assert sm.usage <= 0.9 * cap + CHUNK_SIZE
            assert sm.usage == sum(x.bytes_stored for x in sm.entries.values())
            live[name] = e


@pytest.fixture
def mib_bed(tmp_path):
    from stashfed.testbed import Testbed

    with Testbed(str(tmp_path), chunk_size=2**20) as tb:
        tb.add_redirector()
        yield tb


def cache_bed(tb, capacity=64 * 2**20, **kw):
    origin = tb.add_origin("/exp1")
    cache = tb.add_cache("c1", (41.0, -87.0), capacity=capacity, **kw)
    return origin, cache


def put(origin, rel, data):
    write_file(origin.origin.config.root_dir, rel, data)
    origin.origin.reindex()
    return "/exp1/" + rel


class TestCacheBehaviour:
    def test_cold_then_warm(self, small_bed):
        origin, srv = cache_bed(small_bed)
        c = srv.cache
        data = os.urandom(5000)
        path = put(origin, "f.bin", data)
        assert c.cache_lookup(path) == {0, 1, 2, 3, 4}
        r = c.handle_request(path)
        assert r.status == MISS and r.read() == data
        assert c.stats()["origin_fetches"] == chunk_count(5000, 1024)
        before = origin.origin.stats()["requests"]
        r = c.handle_request(path)
        assert r.status == HIT and r.read() == data
        r = c.handle_request(path, (100, 900))
        assert r.status == HIT and r.read() == data[100:900]
        assert c.stats()["origin_fetches"] == 5
        assert origin.origin.stats()["requests"] == before
        assert c.cache_lookup(path, (0, 100)) == set()

    def test_partial_and_monotone(self, small_bed):
        origin, srv = cache_bed(small_bed)
        c = srv.cache
        data = os.urandom(3 * 1024)
        path = put(origin, "p.bin", data)
        c.fetch_from_origin(path, {0, 2})
        assert c.cache_lookup(path) == {1}
        r = c.handle_request(path)
        assert r.status == PARTIAL and r.read() == data
        assert c.handle_request(path).status == HIT
        assert c.stats()["partials"] == 1

    def test_not_found(self, small_bed):
        _, srv = cache_bed(small_bed)
        with pytest.raises(NotFound):
            srv.cache.handle_request("/exp1/none")
        with pytest.raises(NotFound):
            srv.cache.handle_request("/elsewhere/x")

    def test_single_flight(self, small_bed):
        origin, srv = cache_bed(small_bed)
        c = srv.cache
        data = os.urandom(8 * 1024)
        path = put(origin, "sf.bin", data)

        def slow(p, off, chunk):
            time.sleep(0.02)
            return chunk

        origin.origin.mutator = slow
        results, errors = [], []
        barrier = threading.Barrier(10)

        def reader():
            barrier.wait()
            try:
                results.append(c.handle_request(path).read())
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=reader) for _ in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert all(r == data for r in results) and len(results) == 10
        assert c.stats()["origin_fetches"] == 8

    def test_corruption_once_is_retried(self, small_bed):
        origin, srv = cache_bed(small_bed)
        data = os.urandom(3000)
        path = put(origin, "c.bin", data)
        hits = []

        def flip_once(p, off, chunk):
            if off == 1024 and not hits:
                hits.append(off)
                return chunk[:5] + bytes([chunk[5] ^ 0xFF]) + chunk[6:]
            return chunk

        origin.origin.mutator = flip_once
        assert srv.cache.handle_request(path).read() == data
        st = srv.cache.stats()
        assert st["integrity_failures"] == 1 and st["origin_fetches"] == 4

    def test_persistent_corruption_raises(self, small_bed):
        origin, srv = cache_bed(small_bed)
        path = put(origin, "c.bin", os.urandom(3000))
        origin.origin.mutator = lambda p, off, chunk: (chunk[:-1] + b"\x00" if chunk[-1] else chunk[:-1] + b"\x01") \
            if off == 2048 else chunk
        r = srv.cache.handle_request(path)
        with pytest.raises(IntegrityError) as info:
            r.read()
        assert info.value.chunk_index == 2
        assert srv.cache.cache_lookup(path) == {2}
        assert srv.cache.handle_request(path, (0, 2048)).read() is not None

    def test_eviction_through_requests(self, mib_bed):
        cap = 26 * 2**20
        origin, srv = cache_bed(mib_bed, capacity=cap)
        c = srv.cache
        paths = [put(origin, f"big{i}.bin", os.urandom(4 * 2**20)) for i in range(8)]
        for p in paths:
            assert c.handle_request(p).read() is not None
            assert c.space.usage <= 0.9 * cap + CHUNK_SIZE
        assert c.stats()["evictions"] > 0
        assert c.usage_high_water <= 0.9 * cap + 2**20
        # evicted files are fetched again; survivors are still warm
        survivors = [p for p in paths if normalize_path(p) in c.space.entries]
        assert survivors and paths[-1] in survivors
        assert c.handle_request(paths[-1]).status == HIT
        assert c.handle_request(paths[0]).status == MISS
        stored = sum(os.path.getsize(os.path.join(d, f)) for d, _, fs in
                     os.walk(os.path.join(c.config.storage_dir, "objects")) for f in fs)
        assert stored == c.space.usage

    def test_oversized_file_is_passed_through(self, mib_bed):
        cap = 25 * 2**20
        origin, srv = cache_bed(mib_bed, capacity=cap)
        data = os.urandom(30 * 2**20)
        path = put(origin, "huge.bin", data)
        got = srv.cache.handle_request(path).read()
        assert hashlib.sha256(got).digest() == hashlib.sha256(data).digest()
        assert srv.cache.space.usage <= 0.9 * cap + 2**20

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValueError):
            CacheConfig("c", str(tmp_path), CHUNK_SIZE)
        with pytest.raises(ValueError):
            CacheConfig("c", str(tmp_path), 10 * CHUNK_SIZE, high_watermark=0.5, low_watermark=0.6)


class TestCacheWire:
    def test_http(self, small_bed):
        origin, srv = cache_bed(small_bed)
        data = os.urandom(4000)
        path = put(origin, "w/ü.bin", data)
        ep = srv.endpoint
        r = wire.request(ep, "GET", wire.data_target(path), headers={"Range": "bytes=1000-2999"})
        assert r.status == 206 and r.body == data[1000:3000] and r.header("X-Cache") == MISS
        assert r.header("X-Total-Size") == "4000"
        r = wire.request(ep, "GET", wire.data_target(path))
        assert r.status == 200 and r.body == data and r.header("X-Cache") == PARTIAL
        r = wire.request(ep, "GET", wire.data_target(path))
        assert r.header("X-Cache") == HIT
        assert wire.request(ep, "GET", wire.data_target(path), headers={"Range": "bytes=9000-"}).status == 416
        nf = wire.request(ep, "GET", wire.data_target("/exp1/none"))
        assert nf.status == 404 and nf.header("X-Stash-Error") == "not-found"
        meta = wire.request(ep, "GET", wire.data_target(path, "/meta"))
        assert meta.json()["size"] == 4000 and len(meta.json()["chunks"]) == 4
        assert meta.header("X-Chunk-Size") == "1024"
        stats = wire.request(ep, "GET", "/stats").json()
        for key in ("usage_bytes", "capacity", "entries", "hits", "misses", "origin_fetches", "evictions"):
            assert key in stats

    def test_integrity_error_status(self, small_bed):
        origin, srv = cache_bed(small_bed)
        path = put(origin, "bad.bin", os.urandom(3000))
        origin.origin.mutator = lambda p, off, chunk: bytes(len(chunk)) if off == 0 else chunk
        r = wire.request(srv.endpoint, "GET", wire.data_target(path))
        assert r.status == 502 and r.header("X-Stash-Error") == "integrity" and r.header("X-Stash-Chunk") == "0"

    def test_registers_in_directory(self, small_bed):
        cache_bed(small_bed)
        caches = wire.request(small_bed.redirector_endpoints[0], "GET", "/caches").json()
        assert [c["cache_id"] for c in caches] == ["c1"]
