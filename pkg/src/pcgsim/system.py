"""Cycle-ordered driver tying the cache, prefetch queue, prefetchers and a defense together.

The simulated core issues at most one demand access per cycle.  Between
demand accesses the driver replays, in cycle order, every MSHR fill that
falls due and drains the prefetch queue (``drain_budget`` entries per cycle,
only while an MSHR entry is free).  Within one cycle a due fill is handled
before the demand access, and the demand access before that cycle's drain.
"""

from __future__ import annotations

from .cache import AccessResult, CacheGeometry, CacheModel, LatencyTable, Outcome
from .prefetch import PrefetchQueue, StridePrefetcher, next_line

__all__ = ["MemorySystem"]

_NEVER = 1 << 62


class MemorySystem:
    def __init__(
        self,
        geometry: CacheGeometry | None = None,
        latency: LatencyTable | None = None,
        policy: str = "random",
        seed: int = 0,
        defense=None,
        next_line_degree: int | None = None,
        stride: StridePrefetcher | None = None,
        drain_budget: int = 1,
        queue_drop: str = "newest",
        record: bool = False,
    ):
        self.geometry = geometry or CacheGeometry()
        self.cache = CacheModel(self.geometry, latency, policy, seed)
        self.queue = PrefetchQueue(self.geometry.prefetch_queue_capacity, queue_drop)
        self.defense = defense
        self.next_line_degree = next_line_degree
        self.stride = stride
        self.drain_budget = drain_budget
        self.now = 0
        self._ptime = 0
        self._drain_at = 0
        self._drained_this_cycle = 0
        self.log: list[tuple] | None = [] if record else None
        self._offset_bits = self.geometry.offset_bits
        self.prefetch_sources = {"next_line": 0, "stride": 0, "defense": 0}

    # -- event replay -------------------------------------------------------

    def _process_until(self, t: int):
        """Handle every fill due at cycles <= t and every drain at cycles < t."""
        cache = self.cache
        mshr = cache.mshr
        q = self.queue
        cap = self.geometry.mshr_entries
        while True:
            nf = min([e.completion for e in mshr.values()]) if mshr else _NEVER
            if q and len(mshr) < cap:
                nd = self._drain_at if self._drain_at > self._ptime else self._ptime
            else:
                nd = _NEVER
            if nf <= nd:
                if nf > t:
                    break
                self._ptime = nf
                self._fill(nf)
            else:
                if nd >= t:
                    break
                self._ptime = nd
                self._drain_one(nd)

    def _fill(self, cycle: int):
        cache = self.cache
        for block, e in list(cache.mshr.items()):
            if e.completion != cycle:
                continue
            evicted, entry = cache.fill(block, cycle)
            if self.log is not None:
                self.log.append((cycle, "fill", block, evicted, entry.is_prefetch))
            if self.defense is not None and not entry.is_prefetch:
                for b in self.defense.on_fill(block, evicted, cache, cycle):
                    self._push(b, "defense")

    def _drain_one(self, cycle: int):
        if cycle != self._drain_at:
            self._drain_at = cycle
            self._drained_this_cycle = 0
        block = self.queue.pop()
        res = self.cache.access_block(block, True, cycle)
        if self.log is not None:
            self.log.append((cycle, "prefetch", block, res.outcome.value))
        self._drained_this_cycle += 1
        if self._drained_this_cycle >= self.drain_budget:
            self._drain_at = cycle + 1
            self._drained_this_cycle = 0

    def _push(self, block: int, source: str):
        if block < 0:
            return
        if self.queue.enqueue(block):
            self.prefetch_sources[source] += 1

    # -- core-side operations -----------------------------------------------

    def _demand(self, raw: int, pc: int) -> AccessResult:
        self._process_until(self.now)
        raw = int(raw)
        block = raw >> self._offset_bits
        cache = self.cache
        while True:
            res = cache.access_block(block, False, self.now)
            if res.outcome is not Outcome.MSHR_STALL:
                break
            # retrying every cycle fails until the earliest fill frees an entry
            wake = min([e.completion for e in cache.mshr.values()])
            cache.stats.stalls += wake - self.now - 1
            self.now = wake
            self._process_until(self.now)
        if self.log is not None:
            self.log.append((self.now, "demand", block, res.outcome.value, pc))
        if self.next_line_degree:
            for b in next_line(block, self.next_line_degree):
                self._push(b, "next_line")
        if self.stride is not None:
            for b in self.stride.on_access(pc, raw):
                self._push(b, "stride")
        if self.defense is not None:
            for b in self.defense.on_demand(pc, block, res, self.now):
                self._push(b, "defense")
        return res

    def load(self, raw: int, pc: int = 0) -> AccessResult:
        """Issue a non-blocking load; the core moves on next cycle."""
        res = self._demand(raw, pc)
        self.now += 1
        return res

    def measure(self, raw: int, pc: int = 0) -> int:
        """Blocking load; returns cycles from issue until the data is available."""
        start = self.now
        res = self._demand(raw, pc)
        if res.outcome is Outcome.HIT_L1:
            self.now += res.latency
        else:
            done = self.cache.mshr[res.block].completion
            self._process_until(done)
            self.now = done
        return self.now - start

    def idle(self, cycles: int):
        self.now += cycles
        self._process_until(self.now)

    def quiesce(self):
        """Run until no fill is outstanding and the prefetch queue is empty."""
        while self.cache.mshr or self.queue:
            self.idle(1 + max([e.completion for e in self.cache.mshr.values()], default=self.now) - self.now)

    def load_block(self, block: int) -> AccessResult:
        """Demand-free install helper used by tests and warm-up: allocate and complete a fill."""
        res = self.cache.access_block(block, True, self.now)
        self.quiesce()
        return res
