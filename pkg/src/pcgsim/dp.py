"""Disruptive Prefetching baseline: random order, random degree, set-balanced.

On every demand access a degree ``k`` is drawn from ``[1, max_degree]``; the
next ``k`` blocks are shuffled and each is moved to the nearest of the
currently least-used sets (ties forward).  Since only least-used sets are
ever chosen, per-set prefetch counts never differ by more than one.
"""

from __future__ import annotations

from .cache import CacheGeometry
from .rng import SplitMix64

__all__ = ["DpDefense"]


def _nearest_one(vec: int, start: int, width: int) -> int:
    full = (1 << width) - 1
    rot = ((vec >> start) | (vec << (width - start))) & full
    fwd = (rot & -rot).bit_length() - 1
    if fwd == 0:
        return start
    back = width - (rot.bit_length() - 1)
    if fwd <= back:
        return (start + fwd) % width
    return (start - back) % width


class DpDefense:
    name = "dp"

    def __init__(self, geometry: CacheGeometry | None = None, max_degree: int = 10, seed: int = 0):
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        self.geometry = geometry or CacheGeometry()
        self.max_degree = max_degree
        self.rng = SplitMix64(seed)
        self.width = self.geometry.num_sets
        self.full = (1 << self.width) - 1
        self.set_usage = [0] * self.width
        self._least = self.full  # sets whose usage equals the current minimum
        self.degrees: list[int] = []
        self.record_degrees = False

    def remap(self, block: int) -> int:
        mask = self.width - 1
        s = _nearest_one(self._least, block & mask, self.width)
        self._least &= ~(1 << s)
        if not self._least:
            self._least = self.full
        self.set_usage[s] += 1
        return (block & ~mask) | s

    def on_access(self, block: int) -> list[int]:
        k = self.rng.randint(1, self.max_degree)
        if self.record_degrees:
            self.degrees.append(k)
        cands = list(range(block + 1, block + k + 1))
        self.rng.shuffle(cands)
        return [self.remap(b) for b in cands]

    def on_demand(self, pc: int, block: int, result, now: int) -> list[int]:
        return self.on_access(block)

    def on_fill(self, block, evicted, cache, now):
        return []

    def on_tick(self, now):
        pass
