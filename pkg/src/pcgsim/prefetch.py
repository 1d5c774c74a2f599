"""Prefetch queue and the two basic prefetchers (Next-Line, Stride).

All addresses here are block numbers (byte address >> offset bits).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

__all__ = ["PrefetchQueue", "next_line", "StrideEntry", "StridePrefetcher"]


class PrefetchQueue:
    """Bounded FIFO of block numbers shared by every prefetch source.

    A full queue rejects the *new* request.
    """

    def __init__(self, capacity: int = 32, drop: str = "newest"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if drop not in ("newest", "oldest"):
            raise ValueError(f"drop must be 'newest' or 'oldest', got {drop!r}")
        self.capacity = capacity
        self.drop = drop
        self._q: deque[int] = deque()
        self.accepted = 0
        self.rejected = 0

    def enqueue(self, block: int) -> bool:
        if len(self._q) >= self.capacity:
            self.rejected += 1
            if self.drop == "newest":
                return False
            self._q.popleft()
        self._q.append(block)
        self.accepted += 1
        return True

    def pop(self) -> int:
        return self._q.popleft()

    def peek(self) -> int:
        return self._q[0]

    def clear(self):
        self._q.clear()

    def __len__(self) -> int:
        return len(self._q)

    def __bool__(self) -> bool:
        return bool(self._q)

    def __iter__(self):
        return iter(self._q)


def next_line(block: int, degree: int = 4, max_block: int = (1 << 58) - 1) -> list[int]:
    """Blocks ``block+1 .. block+degree``, truncated at the top of the address space."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    top = min(block + degree, max_block)
    return list(range(block + 1, top + 1))


@dataclass
class StrideEntry:
    pc: int
    last_addr: int
    stride: int = 0
    confidence: int = 0


class StridePrefetcher:
    """PC-indexed stride prefetcher with saturating confidence counters.

    The table is direct-mapped on the low bits of the PC.  A prediction is
    made once ``confidence / max_confidence >= threshold``; with 3-bit
    counters and a 0.5 threshold that means four consecutive confirmations of
    the same stride.  Strides are learned on byte addresses; predictions are
    returned as block numbers.
    """

    def __init__(self, entries: int = 64, counter_bits: int = 3, threshold: float = 0.5,
                 degree: int = 4, block_size: int = 64):
        self.entries = entries
        self.offset_bits = block_size.bit_length() - 1
        self.max_confidence = (1 << counter_bits) - 1
        self.threshold = threshold
        self.degree = degree
        self.table: list[StrideEntry | None] = [None] * entries
        self.fired = 0

    def _slot(self, pc: int) -> int:
        return pc % self.entries

    def on_access(self, pc: int, addr: int) -> list[int]:
        slot = self._slot(pc)
        e = self.table[slot]
        if e is None or e.pc != pc:
            self.table[slot] = StrideEntry(pc, addr)
            return []
        stride = addr - e.last_addr
        e.last_addr = addr
        if stride == 0:
            return []
        if stride == e.stride:
            if e.confidence < self.max_confidence:
                e.confidence += 1
        else:
            if e.confidence > 0:
                e.confidence -= 1
            e.stride = stride
        if e.confidence / self.max_confidence < self.threshold:
            return []
        out = []
        for d in range(1, self.degree + 1):
            target = addr + e.stride * d
            if target < 0:
                break
            b = target >> self.offset_bits
            if not out or out[-1] != b:
                out.append(b)
        self.fired += len(out)
        return out
