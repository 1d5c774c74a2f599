"""Metrics and artifact writers: MSHR ratios, heat-map CSV/PGM, diagonal contrast."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import binom

__all__ = [
    "WorkloadCounts",
    "MshrReport",
    "diagonal_contrast",
    "binomial_sf",
    "heatmap_to_pgm_bytes",
    "read_pgm",
    "write_heatmap_csv",
    "read_heatmap_csv",
    "write_pgm",
    "emit_heatmap",
    "write_json",
]


@dataclass(frozen=True)
class WorkloadCounts:
    name: str
    accesses: int
    cache_misses: int
    mshr_misses: int

    def __post_init__(self):
        if self.accesses <= 0:
            raise ValueError(f"workload {self.name!r} has no accesses")
        if not 0 <= self.mshr_misses <= self.cache_misses <= self.accesses:
            raise ValueError(f"workload {self.name!r}: need mshrMisses <= cacheMisses <= accesses")

    @property
    def mshr_over_accesses(self) -> float:
        return self.mshr_misses / self.accesses

    @property
    def mshr_over_misses(self) -> float:
        return self.mshr_misses / self.cache_misses if self.cache_misses else 0.0

    def as_dict(self) -> dict:
        return {
            "accesses": self.accesses,
            "cacheMisses": self.cache_misses,
            "mshrMisses": self.mshr_misses,
            "mshrMissOverAccesses": self.mshr_over_accesses,
            "mshrMissOverMisses": self.mshr_over_misses,
        }


class MshrReport:
    def __init__(self):
        self.rows: dict[str, WorkloadCounts] = {}

    def add(self, name: str, stats) -> WorkloadCounts:
        """Record a workload from any object with accesses/misses/mshr_misses attributes."""
        row = WorkloadCounts(name, stats.accesses, stats.misses, stats.mshr_misses)
        self.rows[name] = row
        return row

    def __getitem__(self, name: str) -> WorkloadCounts:
        return self.rows[name]

    def as_dict(self) -> dict:
        return {k: v.as_dict() for k, v in self.rows.items()}

    def to_csv(self) -> str:
        lines = ["workload,accesses,cacheMisses,mshrMisses,mshrMissOverAccesses,mshrMissOverMisses"]
        for name, r in self.rows.items():
            lines.append(f"{name},{r.accesses},{r.cache_misses},{r.mshr_misses},"
                         f"{r.mshr_over_accesses:.6f},{r.mshr_over_misses:.6f}")
        return "\n".join(lines) + "\n"


def diagonal_contrast(mean: np.ndarray) -> float:
    """Fraction of rows whose fastest column is the row index (first minimum on ties)."""
    mean = np.asarray(mean)
    if mean.ndim != 2 or mean.shape[0] != mean.shape[1]:
        raise ValueError("heat map must be square")
    return float((mean.argmin(axis=1) == np.arange(mean.shape[0])).mean())


def binomial_sf(k: int, n: int, p: float) -> float:
    """P[X >= k] for X ~ Binomial(n, p)."""
    return float(binom.sf(k - 1, n, p))


# -- heat map artifacts -----------------------------------------------------

def _brightness(mean: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        raise ValueError("latency range must be non-empty")
    norm = np.clip((np.asarray(mean, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return (255 - np.rint(norm * 255)).astype(np.uint8)


def heatmap_to_pgm_bytes(mean: np.ndarray, lo: float, hi: float) -> bytes:
    """Binary P5 graymap; latency ``lo`` maps to white, ``hi`` and above to black."""
    img = _brightness(mean, lo, hi)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_heatmap_csv(path, mean: np.ndarray):
    rows = [",".join(format(float(v), ".6f") for v in row) for row in np.asarray(mean)]
    _write(path, ("\n".join(rows) + "\n").encode("ascii"))


def read_heatmap_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_pgm(path, mean: np.ndarray, lo: float, hi: float):
    _write(path, heatmap_to_pgm_bytes(mean, lo, hi))


def emit_heatmap(mean: np.ndarray, stem, lo: float, hi: float) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.pgm``; returns both paths."""
    stem = Path(stem)
    csv_path, pgm_path = stem.with_suffix(".csv"), stem.with_suffix(".pgm")
    write_heatmap_csv(csv_path, mean)
    write_pgm(pgm_path, mean, lo, hi)
    return csv_path, pgm_path


def write_json(path, obj):
    _write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write(path, data: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
