"""Memory traces: text format, synthetic benign generators and replay.

One access per line, ``<pc-hex> <addr-hex> <R|W>``; blank lines and ``#``
comments are skipped.  Writes are timed exactly like reads (the L1 model
has no write-back traffic).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .rng import SplitMix64

__all__ = [
    "TraceEvent",
    "TraceError",
    "parse_trace",
    "read_trace",
    "write_trace",
    "format_event",
    "sequential_scan",
    "strided_scan",
    "random_walk",
    "pointer_chase",
    "BENIGN_GENERATORS",
    "replay",
]


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    pc: int
    addr: int
    kind: str = "R"


def parse_trace(lines: Iterable[str], source: str = "<trace>") -> list[TraceEvent]:
    events = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TraceError(f"{source}:{lineno}: expected '<pc> <addr> <R|W>', got {line!r}")
        pc_s, addr_s, kind = parts
        kind = kind.upper()
        if kind not in ("R", "W"):
            raise TraceError(f"{source}:{lineno}: access kind must be R or W, got {parts[2]!r}")
        try:
            pc, addr = int(pc_s, 16), int(addr_s, 16)
        except ValueError:
            raise TraceError(f"{source}:{lineno}: bad hex field in {line!r}") from None
        if pc < 0 or addr < 0:
            raise TraceError(f"{source}:{lineno}: negative field in {line!r}")
        events.append(TraceEvent(pc, addr, kind))
    return events


def read_trace(path) -> list[TraceEvent]:
    path = Path(path)
    with path.open() as fh:
        return parse_trace(fh, str(path))


def format_event(ev: TraceEvent) -> str:
    return f"{ev.pc:x} {ev.addr:x} {ev.kind}"


def write_trace(path, events: Iterable[TraceEvent], header: str | None = None):
    path = Path(path)
    with path.open("w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for ev in events:
            fh.write(format_event(ev) + "\n")
    return path


# -- synthetic benign workloads ---------------------------------------------
# Each yields ``n`` events from a fixed PC; ``base`` is block aligned.

def sequential_scan(n: int = 10_000, base: int = 0x4000_0000, elem: int = 8,
                    pc: int = 0x400100) -> Iterator[TraceEvent]:
    """Array walk touching consecutive ``elem``-byte words."""
    for i in range(n):
        yield TraceEvent(pc, base + i * elem, "R")


def strided_scan(n: int = 10_000, base: int = 0x5000_0000, stride: int = 16,
                 pc: int = 0x400200) -> Iterator[TraceEvent]:
    """One field of an array of ``stride``-byte records.

    With a stride of a block or more every access needs its own MSHR entry
    and, at one issue per cycle, prefetches never get one; see the MSHR
    report tests.
    """
    for i in range(n):
        yield TraceEvent(pc, base + i * stride, "R")


def random_walk(n: int = 10_000, base: int = 0x6000_0000, span: int = 1 << 20, max_step: int = 64,
                seed: int = 0, pc: int = 0x400300) -> Iterator[TraceEvent]:
    """Word-granular walk with steps uniform in ``[-max_step, max_step]`` bytes, wrapping at ``span``."""
    rng = SplitMix64(seed)
    pos = span // 2
    for _ in range(n):
        yield TraceEvent(pc, base + (pos & ~7), "R")
        pos = (pos + rng.randint(-max_step, max_step)) % span


def pointer_chase(n: int = 10_000, base: int = 0x7000_0000, nodes: int = 512, node_size: int = 16,
                  disorder: float = 0.1, seed: int = 0, pc: int = 0x400400) -> Iterator[TraceEvent]:
    """Repeated traversal of a small (L1-resident) linked list.

    Nodes come from a bump allocator, so the list starts in address order;
    ``disorder * nodes`` random swaps model later insertions and deletions.
    """
    rng = SplitMix64(seed)
    order = list(range(nodes))
    for _ in range(int(nodes * disorder)):
        i, j = rng.below(nodes), rng.below(nodes)
        order[i], order[j] = order[j], order[i]
    for i in range(n):
        yield TraceEvent(pc, base + order[i % nodes] * node_size, "R")


BENIGN_GENERATORS = {
    "sequential_scan": sequential_scan,
    "strided_scan": strided_scan,
    "random_walk": random_walk,
    "pointer_chase": pointer_chase,
}


def replay(system, events: Iterable[TraceEvent], blocking: bool = False):
    """Feed ``events`` to a memory system, one issue per cycle (or back to back if blocking)."""
    step = system.measure if blocking else system.load
    for ev in events:
        step(ev.addr, ev.pc)
    system.quiesce()
    return system
