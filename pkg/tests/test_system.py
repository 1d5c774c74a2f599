from hypothesis import given, settings, strategies as st

from pcgsim import CacheGeometry, MemorySystem, StridePrefetcher
from pcgsim.cache import LatencyTable, Outcome

G = CacheGeometry()


def test_measure_latencies():
    s = MemorySystem(G, policy="lru")
    assert s.measure(0x1000) == 100
    assert s.measure(0x1000) == 3
    assert s.now == 103


def test_load_is_non_blocking():
    s = MemorySystem(G)
    r = s.load(0x1000)
    assert r.outcome is Outcome.MSHR_MISS
    assert s.now == 1
    # second touch while in flight merges and waits for the remainder
    assert s.measure(0x1010) == 99


def test_fifth_miss_stalls_until_first_fill():
    s = MemorySystem(G)
    for i in range(4):
        s.load(0x10000 + i * 64)
    assert s.cache.mshr_full
    start = s.now
    s.load(0x20000)
    # first fill completes at cycle 100; the demand issues then
    assert start == 4 and s.now == 101
    assert s.cache.stats.stalls == 100 - 4


def test_next_line_prefetches_arrive():
    s = MemorySystem(G, policy="lru", next_line_degree=2)
    s.measure(0x40000)
    s.quiesce()
    b = 0x40000 >> 6
    assert s.cache.is_resident(b + 1) and s.cache.is_resident(b + 2)
    assert s.prefetch_sources["next_line"] == 2
    assert s.measure(0x40040) == 3


def test_drain_budget_one_per_cycle():
    s = MemorySystem(G, next_line_degree=3, record=True)
    s.load(0x40000)
    s.idle(10)
    cycles = [e[0] for e in s.log if e[1] == "prefetch"]
    assert len(cycles) == 3 and len(set(cycles)) == 3


def test_drain_waits_for_free_mshr():
    s = MemorySystem(G, next_line_degree=4, record=True)
    s.load(0x80000)
    s.load(0x90000)
    s.quiesce()
    first_fill = min(e[0] for e in s.log if e[1] == "fill")
    early = [e for e in s.log if e[1] == "prefetch" and e[0] < first_fill]
    # two demand entries leave room for two prefetches; the rest wait for a fill
    assert len(early) == 2
    assert s.cache.stats.prefetch_dropped == 0
    assert s.cache.stats.prefetch_issued == 8


def test_stride_prefetcher_hooked():
    sp = StridePrefetcher(block_size=64)
    s = MemorySystem(G, stride=sp)
    for i in range(8):
        s.measure(0x100000 + i * 256, pc=0x77)
    assert s.prefetch_sources["stride"] > 0


def test_quiesce_empties_everything():
    s = MemorySystem(G, next_line_degree=4)
    for i in range(10):
        s.load(i * 640)
    s.quiesce()
    assert not s.cache.mshr and not s.queue


def test_load_block_installs_without_demand_stats():
    s = MemorySystem(G)
    s.load_block(77)
    assert s.cache.is_resident(77)
    assert s.cache.stats.accesses == 0


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 1 << 16), st.booleans()), min_size=1, max_size=60),
       st.integers(0, 50))
def test_time_monotone_and_counters_consistent(ops, seed):
    s = MemorySystem(G, seed=seed, next_line_degree=2)
    last = 0
    for addr, blocking in ops:
        if blocking:
            lat = s.measure(addr * 8)
            assert lat >= 3   # may include time stalled on a full MSHR file
        else:
            s.load(addr * 8)
        assert s.now >= last
        last = s.now
    st_ = s.cache.stats
    assert st_.accesses == len(ops)
    assert st_.mshr_misses <= st_.misses <= st_.accesses


def test_custom_latency_table():
    s = MemorySystem(G, LatencyTable(2, 20, 60))
    assert s.measure(0) == 60 and s.measure(0) == 2
