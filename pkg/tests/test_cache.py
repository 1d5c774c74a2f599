import pytest
from hypothesis import given, strategies as st

from pcgsim.cache import (
    BackingStore,
    CacheGeometry,
    CacheModel,
    LatencyTable,
    Outcome,
    compose,
    decompose,
)

G = CacheGeometry()


def _full(cache, set_idx, tags, now=0):
    """Install ``tags`` into ``set_idx`` by allocate + fill."""
    for t in tags:
        b = (t << G.index_bits) | set_idx
        cache.access_block(b, False, now)
        cache.fill(b, now + 1000)


def test_default_geometry():
    assert G.size_bytes == 16 * 1024
    assert (G.offset_bits, G.index_bits) == (6, 6)


@pytest.mark.parametrize("kw", [dict(num_sets=63), dict(num_ways=3), dict(block_size=48),
                                dict(mshr_entries=0), dict(prefetch_queue_capacity=0)])
def test_geometry_rejects_bad_shapes(kw):
    with pytest.raises(ValueError):
        CacheGeometry(**kw)


def test_latency_ordering_enforced():
    with pytest.raises(ValueError):
        LatencyTable(l1_hit=50, l2_hit=40, memory=100)


@given(st.integers(0, (1 << 64) - 1))
def test_decompose_roundtrip(raw):
    a = decompose(raw, G)
    assert compose(a.tag, a.index, a.offset, G) == raw
    assert 0 <= a.index < G.num_sets and 0 <= a.offset < G.block_size


def test_decompose_example():
    # 0x1234_5678: offset 0x38, set 0x19, tag 0x1234_5678 >> 12
    a = decompose(0x12345678, G)
    assert (a.tag, a.index, a.offset) == (0x12345, 0x19, 0x38)


def test_miss_then_hit():
    c = CacheModel(G, policy="lru")
    r = c.access(0x4000, now=0)
    assert r.outcome is Outcome.MSHR_MISS and r.latency == 100
    c.fill(r.block, 100)
    r = c.access(0x4008, now=101)
    assert r.outcome is Outcome.HIT_L1 and r.latency == 3


def test_l2_hit_after_l1_eviction():
    c = CacheModel(G, policy="lru")
    _full(c, 0, [1, 2, 3, 4, 5])  # tag 1 evicted by tag 5
    assert not c.is_resident(1 << G.index_bits)
    r = c.access_block(1 << G.index_bits, False, 2000)
    assert r.latency == 40


def test_merge_into_pending_entry():
    c = CacheModel(G)
    r = c.access(0x8000, now=10)
    m = c.access(0x8010, now=30)
    assert m.outcome is Outcome.MISS_MERGED
    assert m.latency == r.latency - 20
    assert c.stats.mshr_misses == 1 and c.stats.merged == 1


def test_merged_latency_floors_at_l1():
    c = CacheModel(G)
    c.access(0x8000, now=0)
    assert c.access(0x8000, now=99).latency == 3


def test_mshr_full_stalls_demand_and_drops_prefetch():
    c = CacheModel(G)
    for i in range(4):
        assert c.access_block(100 + i, False, 0).outcome is Outcome.MSHR_MISS
    assert c.mshr_full
    assert c.access_block(200, False, 0).outcome is Outcome.MSHR_STALL
    assert c.access_block(201, True, 0).outcome is Outcome.PREFETCH_DROPPED
    assert c.stats.prefetch_dropped == 1 and c.stats.stalls == 1


def test_redundant_prefetch_dropped():
    c = CacheModel(G)
    c.access_block(5, False, 0)
    assert c.access_block(5, True, 0).outcome is Outcome.PREFETCH_DROPPED
    c.fill(5, 200)
    assert c.access_block(5, True, 300).outcome is Outcome.PREFETCH_DROPPED
    assert c.stats.prefetch_redundant == 2


def test_fill_not_due_is_noop():
    c = CacheModel(G)
    c.access_block(5, False, 0)
    assert c.fill(5, 50) == (None, None)
    assert not c.is_resident(5)


def test_lru_evicts_least_recent():
    c = CacheModel(G, policy="lru")
    _full(c, 3, [1, 2, 3, 4])
    c.access_block((1 << G.index_bits) | 3, False, 5000)  # touch tag 1
    _full(c, 3, [9], now=6000)
    assert c.is_resident((1 << G.index_bits) | 3)
    assert not c.is_resident((2 << G.index_bits) | 3)


def test_invalid_way_preferred():
    c = CacheModel(G, policy="random", seed=1)
    _full(c, 0, [1, 2, 3])
    assert c.select_victim(0) == 3


def test_evict_first_flag_wins_over_lru():
    c = CacheModel(G, policy="lru")
    _full(c, 2, [1, 2, 3, 4])
    newest = (4 << G.index_bits) | 2
    assert c.mark_evict_first(newest)
    assert c.select_victim(2) == c.way_of(newest)
    _full(c, 2, [7], now=9000)
    assert not c.is_resident(newest)


def test_mark_evict_first_absent_line():
    assert not CacheModel(G).mark_evict_first(12345)


@given(st.lists(st.integers(0, 1 << 12), min_size=1, max_size=200), st.integers(0, 1000))
def test_stats_invariants(blocks, seed):
    c = CacheModel(G, policy="random", seed=seed)
    now = 0
    for b in blocks:
        c.access_block(b, False, now)
        now += 7
        for blk in list(c.mshr):
            c.fill(blk, now)
    s = c.stats
    assert s.mshr_misses + s.merged == s.misses
    assert s.hits + s.misses == s.accesses
    assert s.mshr_misses <= s.misses <= s.accesses
    assert c.valid_lines() <= G.num_sets * G.num_ways
    for ways in c.tags:
        live = [t for t in ways if t is not None]
        assert len(live) == len(set(live))


def test_backing_store_lru():
    bs = BackingStore(LatencyTable(), num_sets=1, num_ways=2)
    assert [bs.lookup(b) for b in (1, 2, 1, 3, 2)] == [100, 100, 40, 100, 100]
    assert 1 not in bs and 3 in bs and 2 in bs
