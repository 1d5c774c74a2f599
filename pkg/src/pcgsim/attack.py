"""Attacker and victim programs that drive a :class:`~pcgsim.system.MemorySystem`.

The attacker only ever learns what a timed load returns; victim state
(the secret) is reachable from :class:`VictimModel` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import CacheGeometry
from .rng import SplitMix64
from .system import MemorySystem

__all__ = [
    "Layout",
    "VictimModel",
    "EvictionSet",
    "AttackOutcome",
    "HeatMap",
    "Attacker",
    "build_eviction_set",
    "chase_order",
    "SHUFFLE_A",
    "SHUFFLE_B",
    "shuffle_order",
]

EVICT_PC = 0x1000
VICTIM_PC = 0x2000
PROBE_PC = 0x3000
PRIME_PC = 0x4000
CHASE_PC = 0x5000

# Multipliers a[t] and offsets b[t] for the probe-order shuffle (g * a[t] + b[t]) & 255.
# Two draws of 100 from the odd primes below 1000 (Python's random.Random(2024).sample);
# frozen here, so the simulator itself never touches the stdlib generator.
SHUFFLE_A = (
    673, 223, 863, 401, 241, 577, 347, 787, 311, 727, 479, 593, 769, 269, 419, 811,
    443, 757, 73, 251, 661, 167, 947, 263, 587, 53, 467, 919, 857, 137, 157, 439,
    547, 881, 463, 971, 773, 607, 883, 431, 373, 109, 643, 617, 859, 127, 107, 17,
    509, 113, 523, 7, 613, 149, 601, 317, 181, 541, 719, 569, 929, 257, 409, 823,
    193, 743, 977, 911, 677, 131, 283, 991, 67, 103, 227, 313, 397, 421, 71, 631,
    233, 887, 197, 599, 521, 83, 61, 563, 997, 383, 29, 43, 89, 3, 983, 271,
    647, 199, 739, 37,
)
SHUFFLE_B = (
    239, 373, 307, 659, 911, 347, 691, 769, 617, 593, 241, 71, 401, 971, 367, 151,
    839, 317, 947, 103, 719, 269, 997, 547, 211, 751, 277, 431, 479, 41, 521, 919,
    131, 281, 53, 139, 257, 89, 199, 293, 311, 383, 569, 499, 83, 79, 797, 61,
    419, 47, 571, 397, 887, 647, 907, 421, 11, 643, 653, 641, 97, 353, 467, 181,
    3, 59, 157, 613, 937, 23, 601, 811, 977, 457, 503, 107, 709, 487, 433, 101,
    283, 541, 727, 631, 883, 761, 271, 109, 929, 389, 821, 743, 67, 577, 677, 179,
    881, 859, 739, 827,
)


def shuffle_order(a: int, b: int) -> list[int]:
    """Probe order ``mix = (guess * a + b) & 255`` for guess = 0..255."""
    return [(g * a + b) & 255 for g in range(256)]


@dataclass(frozen=True)
class Layout:
    """Where the shared array and the attacker's eviction buffer live.

    ``array2_base`` is aligned to ``num_sets * block_size`` so that its 256
    blocks cover every set ``256 / num_sets`` times, block ``g`` in set
    ``g % num_sets``.
    """

    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    array2_base: int = 0x1000_0000
    evict_base: int = 0x2000_0000
    chase_base: int = 0x3000_0000
    n: int = 4

    def __post_init__(self):
        g = self.geometry
        span = g.num_sets * g.block_size
        for name in ("array2_base", "evict_base", "chase_base"):
            if getattr(self, name) % span:
                raise ValueError(f"{name} must be aligned to {span:#x}")

    @property
    def page(self) -> int:
        return self.geometry.num_sets * self.geometry.block_size

    def guess_addr(self, guess: int) -> int:
        return self.array2_base + guess * self.geometry.block_size

    def evict_addr(self, set_idx: int, j: int) -> int:
        return self.evict_base + j * self.page + set_idx * self.geometry.block_size

    @property
    def evict_depth(self) -> int:
        return self.n * self.geometry.num_ways


@dataclass
class VictimModel:
    layout: Layout
    secret: int = 115

    def run(self, system: MemorySystem, pc: int = VICTIM_PC):
        system.measure(self.layout.guess_addr(self.secret & 255), pc)


@dataclass
class EvictionSet:
    addresses: list[int]
    order: str = "sequential"

    def __len__(self):
        return len(self.addresses)

    def __iter__(self):
        return iter(self.addresses)


def build_eviction_set(target: int, geometry: CacheGeometry, n: int = 4,
                       base: int = 0x2000_0000) -> EvictionSet:
    """``n * ways`` block-aligned addresses in ``target``'s set with distinct tags."""
    page = geometry.num_sets * geometry.block_size
    set_idx = (target >> geometry.offset_bits) & (geometry.num_sets - 1)
    base -= base % page
    target_tag = target >> (geometry.offset_bits + geometry.index_bits)
    addrs = []
    j = 0
    while len(addrs) < n * geometry.num_ways:
        a = base + j * page + set_idx * geometry.block_size
        if a >> (geometry.offset_bits + geometry.index_bits) != target_tag:
            addrs.append(a)
        j += 1
    return EvictionSet(addrs)


def chase_order(es: EvictionSet, seed: int = 0) -> EvictionSet:
    """Random permutation of ``es`` with no two equal consecutive strides (cyclically).

    That is what defeats a stride detector: no stride is ever confirmed even once.
    """
    rng = SplitMix64(seed)
    addrs = list(es.addresses)
    if len(addrs) < 3:
        return EvictionSet(addrs, "pointer-chase")
    while True:
        rng.shuffle(addrs)
        ring = addrs + addrs[:2]
        strides = [ring[i + 1] - ring[i] for i in range(len(addrs) + 1)]
        if all(strides[i] != strides[i + 1] for i in range(len(strides) - 1)):
            return EvictionSet(list(addrs), "pointer-chase")


@dataclass
class AttackOutcome:
    per_guess_latency: list[int]
    per_guess_hits: list[int]
    recovered: int
    rounds: int = 1


class HeatMap:
    """Accumulates (secret, guess) latency totals; cell value is the mean."""

    def __init__(self, size: int = 256):
        self.size = size
        self.total = np.zeros((size, size), dtype=np.int64)
        self.count = np.zeros((size, size), dtype=np.int64)

    def add(self, secret: int, latencies):
        self.total[secret] += np.asarray(latencies, dtype=np.int64)
        self.count[secret] += 1

    def merge(self, other: "HeatMap"):
        self.total += other.total
        self.count += other.count

    @property
    def mean(self) -> np.ndarray:
        if (self.count == 0).any():
            raise ValueError("heat map has empty cells; run a full sweep first")
        return self.total / self.count


class Attacker:
    """Runs the conflict-based attack patterns against one memory system."""

    def __init__(self, system: MemorySystem, layout: Layout | None = None,
                 hit_threshold: int = 35, stall: int = 0, seed: int = 0):
        self.system = system
        self.layout = layout or Layout(system.geometry)
        self.hit_threshold = hit_threshold
        self.stall = stall
        self.rng = SplitMix64(seed)
        g = self.layout.geometry
        self._evict_sweep = [
            self.layout.evict_addr(s, j)
            for j in range(self.layout.evict_depth)
            for s in range(g.num_sets)
        ]
        self.trace: list[tuple[int, int]] | None = None

    def _load(self, addr: int, pc: int):
        if self.trace is not None:
            self.trace.append((pc, addr))
        return self.system.load(addr, pc)

    def _measure(self, addr: int, pc: int) -> int:
        if self.trace is not None:
            self.trace.append((pc, addr))
        return self.system.measure(addr, pc)

    # -- phases -------------------------------------------------------------

    def evict_array2(self):
        """Sweep the attacker buffer: every set receives ``n * ways`` conflicting loads."""
        load = self._load
        for a in self._evict_sweep:
            load(a, EVICT_PC)

    def victim_step(self, victim: VictimModel | None):
        if victim is not None:
            if self.trace is not None:
                self.trace.append((VICTIM_PC, self.layout.guess_addr(victim.secret)))
            victim.run(self.system)
        if self.stall:
            self.system.idle(self.rng.randint(0, self.stall))

    def probe(self, order=range(256)) -> list[int]:
        lat = [0] * 256
        measure = self._measure
        addr = self.layout.guess_addr
        sys = self.system
        for g in order:
            lat[g] = measure(addr(g), PROBE_PC)
            sys.idle(1)
        return lat

    # -- attack patterns ----------------------------------------------------

    def evict_reload(self, victim: VictimModel | None, order=range(256)) -> AttackOutcome:
        self.evict_array2()
        self.victim_step(victim)
        lat = self.probe(order)
        hits = [int(x <= self.hit_threshold) for x in lat]
        return AttackOutcome(lat, hits, int(np.argmin(lat)))

    def sweep(self, rounds: int = 1, heatmap: HeatMap | None = None) -> HeatMap:
        """``rounds`` passes over all 256 secrets, accumulating a heat map."""
        hm = heatmap or HeatMap()
        for _ in range(rounds):
            for secret in range(256):
                out = self.evict_reload(VictimModel(self.layout, secret))
                hm.add(secret, out.per_guess_latency)
        return hm

    def repeated_counting(self, victim: VictimModel, outer: int = 100, inner: int = 100,
                          a=SHUFFLE_A, b=SHUFFLE_B) -> AttackOutcome:
        counts = [0] * 256
        thr = self.hit_threshold
        for t in range(outer):
            order = shuffle_order(a[t % len(a)], b[t % len(b)])
            for _ in range(inner):
                out = self.evict_reload(victim, order)
                for g, x in enumerate(out.per_guess_latency):
                    if x <= thr:
                        counts[g] += 1
        recovered = max(range(256), key=counts.__getitem__)
        return AttackOutcome([], counts, recovered, outer * inner)

    def prime_probe(self, es: EvictionSet, victim_addr: int | None) -> bool:
        """Prime the set, let the victim (maybe) touch it, probe; True if any probe missed."""
        for a in es:
            self.system.measure(a, PRIME_PC)
        if victim_addr is not None:
            self.system.measure(victim_addr, VICTIM_PC)
        missed = False
        for a in es:
            if self.system.measure(a, PRIME_PC) > self.hit_threshold:
                missed = True
        return missed

    def evict_time(self, victim_addrs: list[int], evict: bool) -> int:
        """Total cycles the victim spends on ``victim_addrs`` after an optional eviction sweep."""
        sys = self.system
        for a in victim_addrs:
            sys.measure(a, VICTIM_PC)
        if evict:
            self.evict_array2()
        sys.quiesce()
        start = sys.now
        for a in victim_addrs:
            sys.measure(a, VICTIM_PC)
        return sys.now - start

    def chase(self, es: EvictionSet, pc: int = CHASE_PC) -> list[int]:
        """Dependent-load traversal of ``es`` in its stored order; returns latencies."""
        return [self.system.measure(a, pc) for a in es]
