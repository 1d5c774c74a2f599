"""Set-associative non-blocking L1 data cache with an MSHR file.

The cache itself is passive: it answers lookups, allocates MSHR entries and
installs lines when told to.  Time is driven from outside (see
:mod:`pcgsim.system`), which calls :meth:`CacheModel.access` at the current
cycle and :meth:`CacheModel.fill` once an entry's completion cycle is reached.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .rng import SplitMix64

__all__ = [
    "CacheGeometry",
    "LatencyTable",
    "Address",
    "decompose",
    "compose",
    "Outcome",
    "AccessResult",
    "MshrEntry",
    "BackingStore",
    "CacheModel",
]

ADDR_MASK = (1 << 64) - 1


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class CacheGeometry:
    """Shape of the L1 data cache. Defaults: 16KB, 4-way, 64 sets."""

    num_sets: int = 64
    num_ways: int = 4
    block_size: int = 64
    mshr_entries: int = 4
    prefetch_queue_capacity: int = 32

    def __post_init__(self):
        for name in ("num_sets", "num_ways", "block_size"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        for name in ("mshr_entries", "prefetch_queue_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def offset_bits(self) -> int:
        return self.block_size.bit_length() - 1

    @property
    def index_bits(self) -> int:
        return self.num_sets.bit_length() - 1

    @property
    def size_bytes(self) -> int:
        return self.num_sets * self.num_ways * self.block_size


@dataclass(frozen=True)
class LatencyTable:
    l1_hit: int = 3
    l2_hit: int = 40
    memory: int = 100

    def __post_init__(self):
        if not (1 <= self.l1_hit < self.l2_hit <= self.memory):
            raise ValueError(f"latencies must satisfy 1 <= l1 < l2 <= memory: {self}")


class Address(NamedTuple):
    raw: int
    tag: int
    index: int
    offset: int


def decompose(raw: int, geom: CacheGeometry) -> Address:
    raw &= ADDR_MASK
    ob = geom.offset_bits
    ib = geom.index_bits
    return Address(raw, raw >> (ob + ib), (raw >> ob) & (geom.num_sets - 1), raw & (geom.block_size - 1))


def compose(tag: int, index: int, offset: int, geom: CacheGeometry) -> int:
    ob = geom.offset_bits
    return (tag << (ob + geom.index_bits)) | (index << ob) | offset


class Outcome(enum.Enum):
    HIT_L1 = "HitL1"
    MISS_MERGED = "MissMergedIntoMshr"
    MSHR_MISS = "MshrMiss"
    MSHR_STALL = "MshrStall"
    # prefetch-only outcomes
    PREFETCH_DROPPED = "PrefetchDropped"


class AccessResult(NamedTuple):
    outcome: Outcome
    latency: int
    set_index: int
    block: int
    evicted: Optional[int] = None

    @property
    def is_miss(self) -> bool:
        return self.outcome is Outcome.MISS_MERGED or self.outcome is Outcome.MSHR_MISS


@dataclass
class MshrEntry:
    block: int
    completion: int
    merged: int = 0
    is_prefetch: bool = False


class BackingStore:
    """L2 tag store (LRU) in front of memory; only decides the fill latency.

    Default is 512KB, 16-way, i.e. 512 sets of 64B lines.
    """

    def __init__(self, latency: LatencyTable, num_sets: int = 512, num_ways: int = 16):
        self.latency = latency
        self.num_sets = num_sets
        self.num_ways = num_ways
        self._sets: list[dict[int, None]] = [{} for _ in range(num_sets)]
        self.hits = 0
        self.misses = 0

    def lookup(self, block: int) -> int:
        """Fetch ``block`` (a block number) and return its latency."""
        s = self._sets[block % self.num_sets]
        if block in s:
            del s[block]
            s[block] = None
            self.hits += 1
            return self.latency.l2_hit
        s[block] = None
        if len(s) > self.num_ways:
            del s[next(iter(s))]
        self.misses += 1
        return self.latency.memory

    def __contains__(self, block: int) -> bool:
        return block in self._sets[block % self.num_sets]


@dataclass
class CacheStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    mshr_misses: int = 0
    merged: int = 0
    stalls: int = 0
    prefetch_issued: int = 0
    prefetch_dropped: int = 0
    prefetch_redundant: int = 0
    fills: int = 0
    evictions: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class CacheModel:
    """The L1 data cache.

    Blocks are identified by block number (``raw >> offset_bits``) internally;
    the set index is the low ``index_bits`` of the block number and the tag the
    remaining high bits.
    """

    def __init__(
        self,
        geometry: CacheGeometry | None = None,
        latency: LatencyTable | None = None,
        policy: str = "random",
        seed: int = 0,
        backing: BackingStore | None = None,
    ):
        if policy not in ("random", "lru"):
            raise ValueError(f"unknown replacement policy {policy!r}")
        self.geometry = geometry or CacheGeometry()
        self.latency = latency or LatencyTable()
        self.policy = policy
        self.rng = SplitMix64(seed)
        self.backing = backing if backing is not None else BackingStore(self.latency)
        g = self.geometry
        self._set_mask = g.num_sets - 1
        self._set_bits = g.index_bits
        # per-set way arrays; tag None means invalid
        self.tags: list[list[Optional[int]]] = [[None] * g.num_ways for _ in range(g.num_sets)]
        self.evict_first: list[list[bool]] = [[False] * g.num_ways for _ in range(g.num_sets)]
        self._stamp: list[list[int]] = [[0] * g.num_ways for _ in range(g.num_sets)]
        self._clock = 0
        self.mshr: dict[int, MshrEntry] = {}
        self.stats = CacheStats()

    # -- addressing ---------------------------------------------------------

    def block_of(self, raw: int) -> int:
        return (raw & ADDR_MASK) >> self.geometry.offset_bits

    def set_of_block(self, block: int) -> int:
        return block & self._set_mask

    def way_of(self, block: int) -> Optional[int]:
        ways = self.tags[block & self._set_mask]
        tag = block >> self._set_bits
        if tag in ways:
            return ways.index(tag)
        return None

    def is_resident(self, block: int) -> bool:
        return (block >> self._set_bits) in self.tags[block & self._set_mask]

    def valid_lines(self) -> int:
        return sum(t is not None for ways in self.tags for t in ways)

    @property
    def mshr_full(self) -> bool:
        return len(self.mshr) >= self.geometry.mshr_entries

    # -- lookups ------------------------------------------------------------

    def access(self, raw: int, pc: int = 0, kind: str = "demand", now: int = 0) -> AccessResult:
        """Look up ``raw`` at cycle ``now``.

        Demand accesses update replacement state and statistics.  A prefetch
        to a resident or in-flight block, or one arriving while the MSHR file
        is full, is dropped.
        """
        block = (raw & ADDR_MASK) >> self.geometry.offset_bits
        return self.access_block(block, kind == "prefetch", now)

    def access_block(self, block: int, prefetch: bool, now: int) -> AccessResult:
        set_idx = block & self._set_mask
        tag = block >> self._set_bits
        ways = self.tags[set_idx]
        st = self.stats
        if tag in ways:
            if prefetch:
                st.prefetch_redundant += 1
                return AccessResult(Outcome.PREFETCH_DROPPED, 0, set_idx, block)
            if self.policy == "lru":
                self._clock += 1
                self._stamp[set_idx][ways.index(tag)] = self._clock
            st.accesses += 1
            st.hits += 1
            return AccessResult(Outcome.HIT_L1, self.latency.l1_hit, set_idx, block)
        entry = self.mshr.get(block)
        if entry is not None:
            if prefetch:
                st.prefetch_redundant += 1
                return AccessResult(Outcome.PREFETCH_DROPPED, 0, set_idx, block)
            entry.merged += 1
            entry.is_prefetch = False
            st.accesses += 1
            st.misses += 1
            st.merged += 1
            lat = entry.completion - now
            if lat < self.latency.l1_hit:
                lat = self.latency.l1_hit
            return AccessResult(Outcome.MISS_MERGED, lat, set_idx, block)
        if len(self.mshr) >= self.geometry.mshr_entries:
            if prefetch:
                st.prefetch_dropped += 1
                return AccessResult(Outcome.PREFETCH_DROPPED, 0, set_idx, block)
            st.stalls += 1
            return AccessResult(Outcome.MSHR_STALL, 1, set_idx, block)
        lat = self.backing.lookup(block)
        self.mshr[block] = MshrEntry(block, now + lat, 0, prefetch)
        if prefetch:
            st.prefetch_issued += 1
        else:
            st.accesses += 1
            st.misses += 1
            st.mshr_misses += 1
        return AccessResult(Outcome.MSHR_MISS, lat, set_idx, block)

    # -- fills --------------------------------------------------------------

    def next_completion(self) -> Optional[int]:
        if not self.mshr:
            return None
        return min(e.completion for e in self.mshr.values())

    def select_victim(self, set_idx: int) -> int:
        """Way to replace in ``set_idx``: an invalid way, else a flagged line, else per policy."""
        ways = self.tags[set_idx]
        if None in ways:
            return ways.index(None)
        flags = self.evict_first[set_idx]
        if True in flags:
            flagged = [w for w, f in enumerate(flags) if f]
            if len(flagged) == 1:
                return flagged[0]
            return flagged[self.rng.below(len(flagged))]
        if self.policy == "random":
            return self.rng.below(len(ways))
        stamps = self._stamp[set_idx]
        return stamps.index(min(stamps))

    def fill(self, block: int, now: int) -> tuple[Optional[int], Optional[MshrEntry]]:
        """Complete the MSHR entry for ``block`` if it is due.

        Returns ``(evicted_block, entry)``; ``entry`` is None when there was no
        due entry (nothing happened).
        """
        entry = self.mshr.get(block)
        if entry is None or entry.completion > now:
            return None, None
        del self.mshr[block]
        set_idx = block & self._set_mask
        way = self.select_victim(set_idx)
        ways = self.tags[set_idx]
        old = ways[way]
        evicted = None
        if old is not None:
            evicted = (old << self._set_bits) | set_idx
            self.stats.evictions += 1
        ways[way] = block >> self._set_bits
        self.evict_first[set_idx][way] = False
        self._clock += 1
        self._stamp[set_idx][way] = self._clock
        self.stats.fills += 1
        return evicted, entry

    def mark_evict_first(self, block: int) -> bool:
        way = self.way_of(block)
        if way is None:
            return False
        self.evict_first[block & self._set_mask][way] = True
        return True

    def invalidate_all(self):
        for s in range(self.geometry.num_sets):
            self.tags[s] = [None] * self.geometry.num_ways
            self.evict_first[s] = [False] * self.geometry.num_ways
