"""Slow, obviously-correct reference models used only by the tests.

Nothing here imports the package's implementation of the thing it checks.
"""

from __future__ import annotations


class BruteAam:
    """Per-set counters and abnormal flags, advanced one cycle at a time.

    The abnormal flags are re-evaluated over every set on each PC change,
    and the 16-bit period counter is stepped cycle by cycle.
    """

    def __init__(self, sets: int, ways: int, period: int, tau: int | None = None):
        self.sets, self.ways, self.period = sets, ways, period
        self.tau = ways if tau is None else tau
        self.count = [0] * sets
        self.flag = [False] * sets
        self.cnt = 0
        self.cycle = 0
        self.pc = None

    def danger(self) -> int:
        return sum(1 << i for i, f in enumerate(self.flag) if f)

    def run_to(self, cycle: int):
        while self.cycle < cycle:
            self.cycle += 1
            self.cnt = (self.cnt + 1) % 65536
            if self.cnt != 0 and self.cnt % self.period == 0:
                self.count = [0] * self.sets
                self.flag = [False] * self.sets

    def miss(self, pc: int, s: int):
        if pc != self.pc:
            before = any(self.flag)
            self.flag = [f or c >= self.tau for f, c in zip(self.flag, self.count)]
            if not before and any(self.flag):
                self.cnt = 0
            self.pc = pc
        self.count[s] = min(self.ways, self.count[s] + 1)


def closest_zero(vec: int, start: int, width: int) -> int:
    """Zero bit at the smallest circular distance from ``start``; forward wins ties."""
    best = None
    for s in range(width):
        if vec >> s & 1:
            continue
        fwd = (s - start) % width
        back = (start - s) % width
        key = (min(fwd, back), 0 if fwd <= back else 1)
        if best is None or key < best[0]:
            best = (key, s)
    return best[1]


def closest_one(vec: int, start: int, width: int) -> int:
    return closest_zero(~vec & ((1 << width) - 1), start, width)


def survive_probability(ways: int, accesses: int) -> float:
    """Chance a line outlives ``accesses`` conflicting misses under uniform random replacement."""
    return ((ways - 1) / ways) ** accesses
