"""Prefetching-based cache guard: abnormal-set detection plus obfuscating prefetches.

Two cooperating pieces:

* :class:`AttackAwareModule` counts demand MSHR misses per cache set and
  marks a set abnormal once its counter reaches the associativity.
* :class:`ObservationConfusedModule` reacts to demand requests.  On an
  abnormal set whose fill evicted a line, the new line is given the highest
  eviction priority and the evicted line is prefetched back.  On every demand
  miss it issues ``degree`` prefetches to random forward/backward neighbours,
  each steered to a less-observed set by :meth:`~ObservationConfusedModule.balanced_set`.

Set vectors (dangerSet, refSet, danSet) are plain ints used as bitmasks,
bit ``i`` standing for set ``i``.
"""

from __future__ import annotations

from .cache import CacheGeometry, Outcome
from .rng import SplitMix64

__all__ = ["AttackAwareModule", "ObservationConfusedModule", "PcgDefense", "nearest_zero"]

CNT_MASK = 0xFFFF


def nearest_zero(vec: int, start: int, width: int) -> int:
    """Index of the zero bit of ``vec`` circularly closest to ``start``.

    Ties go to the forward (increasing index) neighbour.  ``vec`` must have
    at least one zero bit among its low ``width`` bits.
    """
    full = (1 << width) - 1
    zeros = ~vec & full
    if not zeros:
        raise ValueError("no zero bit to select")
    # rotate so that ``start`` sits at bit 0
    rot = ((zeros >> start) | (zeros << (width - start))) & full
    fwd = (rot & -rot).bit_length() - 1
    if fwd == 0:
        return start
    back = width - (rot.bit_length() - 1)
    if fwd <= back:
        return (start + fwd) % width
    return (start - back) % width


class AttackAwareModule:
    """Per-set saturating counters of demand MSHR misses and the dangerSet vector.

    ``observe`` must only be fed demand accesses that allocated a new MSHR
    entry.  The cycle counter is advanced lazily: :meth:`advance` applies
    every per-cycle tick between the last synchronised cycle and ``now`` in
    one step, which is equivalent to calling :meth:`tick` once per cycle.
    """

    def __init__(self, num_sets: int = 64, num_ways: int = 4, reset_period: int = 10000,
                 tau: int | None = None):
        if reset_period < 1:
            raise ValueError("reset_period must be >= 1")
        self.num_sets = num_sets
        self.num_ways = num_ways
        self.tau = num_ways if tau is None else tau
        self.reset_period = reset_period
        self.counters = [0] * num_sets
        self.danger = 0
        self.last_pc: int | None = None
        self.cnt = 0
        self.cycle = 0
        self.resets = 0

    def danger_at(self, set_idx: int) -> bool:
        return bool(self.danger >> set_idx & 1)

    def danger_sets(self) -> list[int]:
        return [i for i in range(self.num_sets) if self.danger >> i & 1]

    def _clear(self):
        self.counters = [0] * self.num_sets
        self.danger = 0
        self.resets += 1

    def tick(self):
        self.cycle += 1
        self.cnt = (self.cnt + 1) & CNT_MASK
        if self.cnt != 0 and self.cnt % self.reset_period == 0:
            self._clear()

    def _ticks_to_reset(self) -> int | None:
        T = self.reset_period
        if T > CNT_MASK:
            return None
        nxt = (self.cnt // T + 1) * T
        if nxt <= CNT_MASK:
            return nxt - self.cnt
        return CNT_MASK + 1 - self.cnt + T

    def advance(self, now: int):
        delta = now - self.cycle
        if delta <= 0:
            return
        k = self._ticks_to_reset()
        if k is not None and k <= delta:
            self._clear()
        self.cnt = (self.cnt + delta) & CNT_MASK
        self.cycle = now

    def observe(self, pc: int, set_idx: int):
        if pc != self.last_pc:
            was_zero = self.danger == 0
            tau = self.tau
            for i, c in enumerate(self.counters):
                if c >= tau:
                    self.danger |= 1 << i
            if was_zero and self.danger:
                self.cnt = 0
            self.last_pc = pc
        c = self.counters[set_idx]
        if c < self.num_ways:
            self.counters[set_idx] = c + 1


class ObservationConfusedModule:
    """refSet/danSet bookkeeping, set balancing and prefetch generation.

    ``dan_set`` starts all-ones so that, until refSet first saturates, the
    balancer works from refSet alone.
    """

    def __init__(self, geometry: CacheGeometry | None = None, degree: int = 4, seed: int = 0):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.geometry = geometry or CacheGeometry()
        self.degree = degree
        self.rng = SplitMix64(seed)
        self.width = self.geometry.num_sets
        self.full = (1 << self.width) - 1
        self.ref_set = 0
        self.dan_set = self.full
        self.epochs = 0

    def balanced_set(self, t_set: int, danger: int) -> tuple[int, str]:
        """Pick the set a noise prefetch aimed at ``t_set`` is moved to.

        Returns ``(final_set, branch)`` with branch ``"dan"`` or ``"ref"``.
        """
        if self.ref_set == self.full:
            self.ref_set = 0
            self.dan_set = ~danger & self.full
            self.epochs += 1
        if self.dan_set != self.full:
            s = nearest_zero(self.dan_set, t_set, self.width)
            self.dan_set |= 1 << s
            return s, "dan"
        s = nearest_zero(self.ref_set, t_set, self.width)
        self.ref_set |= 1 << s
        return s, "ref"

    def balance_block(self, block: int, danger: int) -> int:
        """Block number with the set index of ``block`` replaced by the balanced set."""
        mask = self.width - 1
        final, _ = self.balanced_set(block & mask, danger)
        return (block & ~mask) | final

    def on_request(self, block: int, miss: bool, danger: int) -> list[int]:
        """Noise part of the algorithm for one demand request; returns prefetch blocks."""
        mask = self.width - 1
        self.ref_set |= 1 << (block & mask)
        if not miss:
            return []
        out = []
        bit = self.rng.bit
        for d in range(1, self.degree + 1):
            if bit() == 0:
                temp = block + d
            else:
                temp = block - d
                if temp < 0:
                    continue
            final, _ = self.balanced_set(temp & mask, danger)
            out.append((temp & ~mask) | final)
        return out


class PcgDefense:
    """Glue between the memory system hooks and the two modules."""

    name = "pcg"

    def __init__(self, geometry: CacheGeometry | None = None, degree: int = 4,
                 reset_period: int = 10000, seed: int = 0):
        self.geometry = geometry or CacheGeometry()
        self.aam = AttackAwareModule(self.geometry.num_sets, self.geometry.num_ways, reset_period)
        self.ocm = ObservationConfusedModule(self.geometry, degree, seed)
        self.reclaimed = 0
        self.noise = 0
        # (cycle, set, evicted block) for every evicted line pushed back
        self.reclaim_log: list[tuple[int, int, int]] = []

    def on_demand(self, pc: int, block: int, result, now: int) -> list[int]:
        aam = self.aam
        aam.advance(now)
        if result.outcome is Outcome.MSHR_MISS:
            aam.observe(pc, block & (self.geometry.num_sets - 1))
        out = self.ocm.on_request(block, result.is_miss, aam.danger)
        self.noise += len(out)
        return out

    def on_fill(self, block: int, evicted: int | None, cache, now: int) -> list[int]:
        """Footprint reduction, evaluated when a demand miss's line is installed."""
        if evicted is None:
            return []
        aam = self.aam
        aam.advance(now)
        set_idx = block & (self.geometry.num_sets - 1)
        if not aam.danger >> set_idx & 1:
            return []
        cache.mark_evict_first(block)
        self.reclaimed += 1
        self.reclaim_log.append((now, set_idx, evicted))
        return [evicted]

    def on_tick(self, now: int):
        self.aam.advance(now)
