"""SplitMix64 stream shared by the reference model and the compiled engine.

Both implementations must draw identical numbers for identical seeds, so
every random decision in the simulator goes through this generator rather
than :mod:`random` or :mod:`numpy.random`.
"""

from __future__ import annotations

M64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = seed & M64

    def next(self) -> int:
        self.state = s = (self.state + GOLDEN) & M64
        z = ((s ^ (s >> 30)) * MIX1) & M64
        z = ((z ^ (z >> 27)) * MIX2) & M64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by 32-bit multiply-shift."""
        return ((self.next() >> 32) * n) >> 32

    def bit(self) -> int:
        return self.next() >> 63

    def randint(self, lo: int, hi: int) -> int:
        return lo + self.below(hi - lo + 1)

    def random(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, seq: list):
        for i in range(len(seq) - 1, 0, -1):
            j = self.below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]


def derive_seed(seed: int, stream: int) -> int:
    """Independent per-component seed from a master seed."""
    g = SplitMix64(seed ^ (stream * GOLDEN & M64))
    return g.next()
