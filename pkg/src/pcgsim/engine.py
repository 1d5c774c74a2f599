"""Compiled twin of :class:`~pcgsim.system.MemorySystem` plus the Evict+Reload loop.

The security experiments need hundreds of thousands of attacks, which is out
of reach for the object model.  This module re-expresses the same machine
(cache, MSHR file, L2 tag store, prefetch queue, PCG and DP defenses) over
flat numpy arrays and compiles it with numba.  Event ordering and random
draws follow the reference model exactly; ``tests/test_engine.py`` checks
the two produce identical latencies and counters.

All int64 state lives in one array ``m`` (config, scalars, counters and the
per-set tables at offsets recorded in the config block) and the RNG states
and set vectors in one uint64 array ``u``.  Passing two arrays keeps
non-inlined calls cheap.

Restrictions: at most 64 cache sets (set vectors are single uint64 words)
and no basic prefetchers (the security experiments run without them).
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .cache import CacheGeometry, LatencyTable
from .rng import GOLDEN, M64, MIX1, MIX2

__all__ = ["Engine", "DEFENSES", "STAT_NAMES"]

DEFENSES = {"none": 0, "pcg": 1, "dp": 2}
POLICIES = {"random": 0, "lru": 1}
DROPS = {"newest": 0, "oldest": 1}

NEVER = 1 << 62

# config block
(C_S, C_W, C_OB, C_IB, C_MSHR, C_QCAP, C_L1, C_L2, C_MEM, C_POLICY, C_DEF, C_DEG, C_T, C_TAU,
 C_DPMAX, C_BUDGET, C_QDROP, C_L2S, C_L2W) = range(19)
# table offsets
(A_TAGS, A_FLAGS, A_STAMPS, A_MBLK, A_MDONE, A_MPF, A_Q, A_L2B, A_L2T, A_CNTR, A_DPU,
 A_END) = range(19, 31)
# scalars
(S_NOW, S_PTIME, S_DRAIN_AT, S_DRAINED, S_QHEAD, S_QLEN, S_MSHR_N, S_CLOCK, S_L2CLOCK, S_CNT,
 S_ACYCLE, S_LASTPC, S_HAS_LASTPC) = range(32, 45)
STAT_BASE = 48
STAT_NAMES = (
    "accesses", "hits", "misses", "mshr_misses", "merged", "stalls", "prefetch_issued",
    "prefetch_dropped", "prefetch_redundant", "fills", "evictions", "queue_rejected",
    "noise", "reclaimed", "aam_resets", "ocm_epochs",
)
(T_ACC, T_HIT, T_MISS, T_MSHR, T_MERGED, T_STALL, T_PFI, T_PFD, T_PFR, T_FILL, T_EVICT, T_QREJ,
 T_NOISE, T_RECLAIM, T_ARESET, T_EPOCH) = range(STAT_BASE, STAT_BASE + len(STAT_NAMES))
TABLE_BASE = 64

# uint64 words
U_CRNG, U_ORNG, U_DRNG, U_ARNG, U_DANGER, U_REF, U_DAN, U_DPLEAST = range(8)

O_HIT, O_MERGED, O_MSHR, O_STALL, O_DROP = range(5)

EVICT_PC = 0x1000
VICTIM_PC = 0x2000
PROBE_PC = 0x3000

_ONE = np.uint64(1)


@njit(cache=True, inline="always")
def _next(u, k):
    s = u[k] + np.uint64(GOLDEN)
    u[k] = s
    z = (s ^ (s >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _below(u, k, n):
    return np.int64(((_next(u, k) >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32))


@njit(cache=True, inline="always")
def _test(vec, i):
    return (vec >> np.uint64(i)) & _ONE


@njit(cache=True)
def _nearest(vec, start, width, want):
    # circular scan outward from ``start``, forward neighbour first
    for d in range(width // 2 + 1):
        f = (start + d) % width
        if _test(vec, f) == want:
            return f
        b = (start - d + width) % width
        if _test(vec, b) == want:
            return b
    return -1


@njit(cache=True, inline="always")
def _full(width):
    if width == 64:
        return ~np.uint64(0)
    return (_ONE << np.uint64(width)) - _ONE


# -- L2 ---------------------------------------------------------------------

@njit(cache=True)
def _l2_lookup(m, block):
    ways = m[C_L2W]
    base = (block % m[C_L2S]) * ways
    tb = m[A_L2B] + base
    ts = m[A_L2T] + base
    m[S_L2CLOCK] += 1
    clk = m[S_L2CLOCK]
    for w in range(ways):
        if m[tb + w] == block:
            m[ts + w] = clk
            return m[C_L2]
    victim = -1
    for w in range(ways):
        if m[tb + w] < 0:
            victim = w
            break
    if victim < 0:
        victim = 0
        for w in range(1, ways):
            if m[ts + w] < m[ts + victim]:
                victim = w
    m[tb + victim] = block
    m[ts + victim] = clk
    return m[C_MEM]


# -- L1 ---------------------------------------------------------------------

@njit(cache=True, inline="always")
def _find_way(m, set_idx, tag):
    W = m[C_W]
    t = m[A_TAGS] + set_idx * W
    for w in range(W):
        if m[t + w] == tag:
            return w
    return -1


@njit(cache=True, inline="always")
def _mshr_find(m, block):
    b = m[A_MBLK]
    for i in range(m[S_MSHR_N]):
        if m[b + i] == block:
            return i
    return -1


@njit(cache=True, inline="always")
def _min_done(m):
    d = m[A_MDONE]
    nf = NEVER
    for i in range(m[S_MSHR_N]):
        if m[d + i] < nf:
            nf = m[d + i]
    return nf


@njit(cache=True)
def _access(m, block, prefetch, now):
    """Returns (outcome, latency)."""
    W = m[C_W]
    set_idx = block & (m[C_S] - 1)
    tag = block >> m[C_IB]
    w = _find_way(m, set_idx, tag)
    if w >= 0:
        if prefetch:
            m[T_PFR] += 1
            return O_DROP, 0
        if m[C_POLICY] == 1:
            m[S_CLOCK] += 1
            m[m[A_STAMPS] + set_idx * W + w] = m[S_CLOCK]
        m[T_ACC] += 1
        m[T_HIT] += 1
        return O_HIT, m[C_L1]
    i = _mshr_find(m, block)
    if i >= 0:
        if prefetch:
            m[T_PFR] += 1
            return O_DROP, 0
        m[m[A_MPF] + i] = 0
        m[T_ACC] += 1
        m[T_MISS] += 1
        m[T_MERGED] += 1
        lat = m[m[A_MDONE] + i] - now
        if lat < m[C_L1]:
            lat = m[C_L1]
        return O_MERGED, lat
    n = m[S_MSHR_N]
    if n >= m[C_MSHR]:
        if prefetch:
            m[T_PFD] += 1
            return O_DROP, 0
        m[T_STALL] += 1
        return O_STALL, 1
    lat = _l2_lookup(m, block)
    m[m[A_MBLK] + n] = block
    m[m[A_MDONE] + n] = now + lat
    m[m[A_MPF] + n] = 1 if prefetch else 0
    m[S_MSHR_N] = n + 1
    if prefetch:
        m[T_PFI] += 1
    else:
        m[T_ACC] += 1
        m[T_MISS] += 1
        m[T_MSHR] += 1
    return O_MSHR, lat


@njit(cache=True)
def _select_victim(m, u, set_idx):
    W = m[C_W]
    t = m[A_TAGS] + set_idx * W
    f = m[A_FLAGS] + set_idx * W
    for w in range(W):
        if m[t + w] < 0:
            return w
    nflag = 0
    for w in range(W):
        if m[f + w]:
            nflag += 1
    if nflag > 0:
        pick = 0 if nflag == 1 else _below(u, U_CRNG, nflag)
        for w in range(W):
            if m[f + w]:
                if pick == 0:
                    return w
                pick -= 1
    if m[C_POLICY] == 0:
        return _below(u, U_CRNG, W)
    s = m[A_STAMPS] + set_idx * W
    victim = 0
    for w in range(1, W):
        if m[s + w] < m[s + victim]:
            victim = w
    return victim


# -- prefetch queue -----------------------------------------------------------

@njit(cache=True, inline="always")
def _push(m, block):
    if block < 0:
        return
    cap = m[C_QCAP]
    if m[S_QLEN] >= cap:
        m[T_QREJ] += 1
        if m[C_QDROP] == 0:
            return
        m[S_QHEAD] = (m[S_QHEAD] + 1) % cap
        m[S_QLEN] -= 1
    m[m[A_Q] + (m[S_QHEAD] + m[S_QLEN]) % cap] = block
    m[S_QLEN] += 1


@njit(cache=True, inline="always")
def _pop(m):
    b = m[m[A_Q] + m[S_QHEAD]]
    m[S_QHEAD] = (m[S_QHEAD] + 1) % m[C_QCAP]
    m[S_QLEN] -= 1
    return b


# -- AAM / OCM / DP ---------------------------------------------------------

@njit(cache=True)
def _aam_advance(m, u, now):
    delta = now - m[S_ACYCLE]
    if delta <= 0:
        return
    T = m[C_T]
    cnt = m[S_CNT]
    if T <= 0xFFFF:
        nxt = (cnt // T + 1) * T
        if nxt <= 0xFFFF:
            k = nxt - cnt
        else:
            k = 0x10000 - cnt + T
        if k <= delta:
            c = m[A_CNTR]
            for i in range(m[C_S]):
                m[c + i] = 0
            u[U_DANGER] = np.uint64(0)
            m[T_ARESET] += 1
    m[S_CNT] = (cnt + delta) & 0xFFFF
    m[S_ACYCLE] = now


@njit(cache=True)
def _aam_observe(m, u, pc, set_idx):
    c = m[A_CNTR]
    if m[S_HAS_LASTPC] == 0 or pc != m[S_LASTPC]:
        d = u[U_DANGER]
        was_zero = d == 0
        tau = m[C_TAU]
        for i in range(m[C_S]):
            if m[c + i] >= tau:
                d |= _ONE << np.uint64(i)
        u[U_DANGER] = d
        if was_zero and d != 0:
            m[S_CNT] = 0
        m[S_LASTPC] = pc
        m[S_HAS_LASTPC] = 1
    if m[c + set_idx] < m[C_W]:
        m[c + set_idx] += 1


@njit(cache=True)
def _balanced_set(m, u, t_set):
    width = m[C_S]
    full = _full(width)
    if u[U_REF] == full:
        u[U_REF] = np.uint64(0)
        u[U_DAN] = ~u[U_DANGER] & full
        m[T_EPOCH] += 1
    if u[U_DAN] != full:
        s = _nearest(u[U_DAN], t_set, width, np.uint64(0))
        u[U_DAN] |= _ONE << np.uint64(s)
        return s
    s = _nearest(u[U_REF], t_set, width, np.uint64(0))
    u[U_REF] |= _ONE << np.uint64(s)
    return s


@njit(cache=True)
def _pcg_on_demand(m, u, pc, block, outcome, now):
    _aam_advance(m, u, now)
    mask = m[C_S] - 1
    if outcome == O_MSHR:
        _aam_observe(m, u, pc, block & mask)
    u[U_REF] |= _ONE << np.uint64(block & mask)
    if outcome != O_MSHR and outcome != O_MERGED:
        return
    for d in range(1, m[C_DEG] + 1):
        if (_next(u, U_ORNG) >> np.uint64(63)) == 0:
            temp = block + d
        else:
            temp = block - d
            if temp < 0:
                continue
        final = _balanced_set(m, u, temp & mask)
        m[T_NOISE] += 1
        _push(m, (temp & ~mask) | final)


@njit(cache=True)
def _dp_on_demand(m, u, block):
    width = m[C_S]
    mask = width - 1
    k = 1 + _below(u, U_DRNG, m[C_DPMAX])
    cands = np.empty(k, dtype=np.int64)
    for i in range(k):
        cands[i] = block + 1 + i
    for i in range(k - 1, 0, -1):
        j = _below(u, U_DRNG, i + 1)
        tmp = cands[i]
        cands[i] = cands[j]
        cands[j] = tmp
    full = _full(width)
    for i in range(k):
        b = cands[i]
        s = _nearest(u[U_DPLEAST], b & mask, width, _ONE)
        u[U_DPLEAST] &= ~(_ONE << np.uint64(s))
        if u[U_DPLEAST] == 0:
            u[U_DPLEAST] = full
        m[m[A_DPU] + s] += 1
        _push(m, (b & ~mask) | s)


# -- event replay -----------------------------------------------------------

@njit(cache=True)
def _install(m, u, block, pf, cycle):
    W = m[C_W]
    set_idx = block & (m[C_S] - 1)
    way = _select_victim(m, u, set_idx)
    t = m[A_TAGS] + set_idx * W + way
    f = m[A_FLAGS] + set_idx * W + way
    old = m[t]
    evicted = -1
    if old >= 0:
        evicted = (old << m[C_IB]) | set_idx
        m[T_EVICT] += 1
    m[t] = block >> m[C_IB]
    m[f] = 0
    m[S_CLOCK] += 1
    m[m[A_STAMPS] + set_idx * W + way] = m[S_CLOCK]
    m[T_FILL] += 1
    if pf == 0 and m[C_DEF] == 1 and evicted >= 0:
        _aam_advance(m, u, cycle)
        if _test(u[U_DANGER], set_idx):
            m[f] = 1
            m[T_RECLAIM] += 1
            _push(m, evicted)


@njit(cache=True)
def _fill_cycle(m, u, cycle):
    bl = m[A_MBLK]
    dn = m[A_MDONE]
    pf = m[A_MPF]
    i = 0
    while i < m[S_MSHR_N]:
        if m[dn + i] != cycle:
            i += 1
            continue
        block = m[bl + i]
        was_pf = m[pf + i]
        n = m[S_MSHR_N]
        for j in range(i, n - 1):
            m[bl + j] = m[bl + j + 1]
            m[dn + j] = m[dn + j + 1]
            m[pf + j] = m[pf + j + 1]
        m[S_MSHR_N] = n - 1
        _install(m, u, block, was_pf, cycle)


@njit(cache=True)
def _drain_one(m, cycle):
    if cycle != m[S_DRAIN_AT]:
        m[S_DRAIN_AT] = cycle
        m[S_DRAINED] = 0
    block = _pop(m)
    _access(m, block, True, cycle)
    m[S_DRAINED] += 1
    if m[S_DRAINED] >= m[C_BUDGET]:
        m[S_DRAIN_AT] = cycle + 1
        m[S_DRAINED] = 0


@njit(cache=True)
def _process_until(m, u, t):
    cap = m[C_MSHR]
    while True:
        nf = _min_done(m)
        if m[S_QLEN] > 0 and m[S_MSHR_N] < cap:
            nd = m[S_DRAIN_AT] if m[S_DRAIN_AT] > m[S_PTIME] else m[S_PTIME]
        else:
            nd = NEVER
        if nf <= nd:
            if nf > t:
                break
            m[S_PTIME] = nf
            _fill_cycle(m, u, nf)
        else:
            if nd >= t:
                break
            m[S_PTIME] = nd
            _drain_one(m, nd)


@njit(cache=True)
def _demand(m, u, raw, pc):
    _process_until(m, u, m[S_NOW])
    block = raw >> m[C_OB]
    while True:
        outcome, lat = _access(m, block, False, m[S_NOW])
        if outcome != O_STALL:
            break
        wake = _min_done(m)
        m[T_STALL] += wake - m[S_NOW] - 1
        m[S_NOW] = wake
        _process_until(m, u, wake)
    d = m[C_DEF]
    if d == 1:
        _pcg_on_demand(m, u, pc, block, outcome, m[S_NOW])
    elif d == 2:
        _dp_on_demand(m, u, block)
    return outcome, lat, block


@njit(cache=True)
def _load(m, u, raw, pc):
    outcome, lat, block = _demand(m, u, raw, pc)
    m[S_NOW] += 1
    return outcome


@njit(cache=True)
def _measure(m, u, raw, pc):
    start = m[S_NOW]
    outcome, lat, block = _demand(m, u, raw, pc)
    if outcome == O_HIT:
        m[S_NOW] += lat
    else:
        done = m[m[A_MDONE] + _mshr_find(m, block)]
        _process_until(m, u, done)
        m[S_NOW] = done
    return m[S_NOW] - start


@njit(cache=True)
def _idle(m, u, cycles):
    m[S_NOW] += cycles
    _process_until(m, u, m[S_NOW])


@njit(cache=True)
def _run_attacks(m, u, evict_addrs, array2_base, block_size, secrets, orders, order_idx, stall,
                 out):
    for a in range(secrets.shape[0]):
        for k in range(evict_addrs.shape[0]):
            _load(m, u, evict_addrs[k], EVICT_PC)
        if secrets[a] >= 0:
            _measure(m, u, array2_base + secrets[a] * block_size, VICTIM_PC)
        if stall > 0:
            _idle(m, u, _below(u, U_ARNG, stall + 1))
        row = orders[order_idx[a]]
        for gi in range(row.shape[0]):
            g = row[gi]
            out[a, g] = _measure(m, u, array2_base + g * block_size, PROBE_PC)
            _idle(m, u, 1)


@njit(cache=True)
def _run_trace(m, u, addrs, pcs, blocking, out):
    for i in range(addrs.shape[0]):
        if blocking:
            out[i] = _measure(m, u, addrs[i], pcs[i])
        else:
            out[i] = _load(m, u, addrs[i], pcs[i])


class Engine:
    """Array-backed memory system with the same knobs as the reference model.

    ``seed`` feeds the replacement RNG, ``defense_seed`` the OCM direction or
    DP stream and ``attacker_seed`` the optional random stall.
    """

    def __init__(
        self,
        geometry: CacheGeometry | None = None,
        latency: LatencyTable | None = None,
        policy: str = "random",
        seed: int = 0,
        defense: str = "none",
        degree: int = 4,
        reset_period: int = 10000,
        defense_seed: int = 0,
        dp_max_degree: int = 10,
        queue_drop: str = "newest",
        drain_budget: int = 1,
        attacker_seed: int = 0,
        l2_sets: int = 512,
        l2_ways: int = 16,
    ):
        g = self.geometry = geometry or CacheGeometry()
        lat = self.latency = latency or LatencyTable()
        if g.num_sets > 64:
            raise ValueError("the compiled engine supports at most 64 sets")
        if defense not in DEFENSES:
            raise ValueError(f"unknown defense {defense!r}")
        if reset_period < 1:
            raise ValueError("reset_period must be >= 1")
        self.defense = defense
        S, W = g.num_sets, g.num_ways
        sizes = [
            (A_TAGS, S * W), (A_FLAGS, S * W), (A_STAMPS, S * W),
            (A_MBLK, g.mshr_entries), (A_MDONE, g.mshr_entries), (A_MPF, g.mshr_entries),
            (A_Q, g.prefetch_queue_capacity), (A_L2B, l2_sets * l2_ways),
            (A_L2T, l2_sets * l2_ways), (A_CNTR, S), (A_DPU, S),
        ]
        off = TABLE_BASE
        offsets = {}
        for slot, n in sizes:
            offsets[slot] = off
            off += n
        m = np.zeros(off, dtype=np.int64)
        for slot, o in offsets.items():
            m[slot] = o
        m[A_END] = off
        m[C_S], m[C_W] = S, W
        m[C_OB], m[C_IB] = g.offset_bits, g.index_bits
        m[C_MSHR], m[C_QCAP] = g.mshr_entries, g.prefetch_queue_capacity
        m[C_L1], m[C_L2], m[C_MEM] = lat.l1_hit, lat.l2_hit, lat.memory
        m[C_POLICY] = POLICIES[policy]
        m[C_DEF] = DEFENSES[defense]
        m[C_DEG] = degree
        m[C_T] = reset_period
        m[C_TAU] = W
        m[C_DPMAX] = dp_max_degree
        m[C_BUDGET] = drain_budget
        m[C_QDROP] = DROPS[queue_drop]
        m[C_L2S], m[C_L2W] = l2_sets, l2_ways
        m[offsets[A_TAGS]:offsets[A_TAGS] + S * W] = -1
        m[offsets[A_L2B]:offsets[A_L2B] + l2_sets * l2_ways] = -1
        u = np.zeros(8, dtype=np.uint64)
        u[U_CRNG] = seed & M64
        u[U_ORNG] = defense_seed & M64
        u[U_DRNG] = defense_seed & M64
        u[U_ARNG] = attacker_seed & M64
        full = M64 if S == 64 else (1 << S) - 1
        u[U_DAN] = full
        u[U_DPLEAST] = full
        self.m, self.u = m, u
        self._offsets = offsets

    def _table(self, slot, shape):
        o = self._offsets[slot]
        n = int(np.prod(shape))
        return self.m[o:o + n].reshape(shape)

    @property
    def now(self) -> int:
        return int(self.m[S_NOW])

    @property
    def danger(self) -> int:
        return int(self.u[U_DANGER])

    @property
    def tags(self) -> np.ndarray:
        """View of the L1 tag array, -1 for invalid ways."""
        return self._table(A_TAGS, (self.geometry.num_sets, self.geometry.num_ways))

    @property
    def set_usage(self) -> np.ndarray:
        """DP prefetches placed per set."""
        return self._table(A_DPU, (self.geometry.num_sets,))

    def stats(self) -> dict:
        return {k: int(self.m[STAT_BASE + i]) for i, k in enumerate(STAT_NAMES)}

    def load(self, raw: int, pc: int = 0) -> int:
        return int(_load(self.m, self.u, np.int64(raw), np.int64(pc)))

    def measure(self, raw: int, pc: int = 0) -> int:
        return int(_measure(self.m, self.u, np.int64(raw), np.int64(pc)))

    def idle(self, cycles: int):
        _idle(self.m, self.u, np.int64(cycles))

    def run_trace(self, addrs, pcs, blocking: bool = False) -> np.ndarray:
        """Replay a trace; returns latencies (blocking) or outcome codes."""
        addrs = np.asarray(addrs, dtype=np.int64)
        out = np.zeros(len(addrs), dtype=np.int64)
        _run_trace(self.m, self.u, addrs, np.asarray(pcs, dtype=np.int64), blocking, out)
        return out

    def run_attacks(self, evict_addrs, array2_base: int, secrets, orders, order_idx=None,
                    stall: int = 0) -> np.ndarray:
        """Evict+Reload attacks, one per entry of ``secrets`` (-1 = victim idle).

        ``orders`` is a ``(k, 256)`` array of probe orders and ``order_idx``
        picks the order for each attack.  Returns per-guess latencies, shape
        ``(len(secrets), 256)``.
        """
        secrets = np.asarray(secrets, dtype=np.int64)
        orders = np.atleast_2d(np.asarray(orders, dtype=np.int64))
        if order_idx is None:
            order_idx = np.zeros(len(secrets), dtype=np.int64)
        order_idx = np.asarray(order_idx, dtype=np.int64)
        out = np.zeros((len(secrets), 256), dtype=np.int64)
        _run_attacks(self.m, self.u, np.asarray(evict_addrs, dtype=np.int64),
                     np.int64(array2_base), np.int64(self.geometry.block_size), secrets, orders,
                     order_idx, np.int64(stall), out)
        return out
