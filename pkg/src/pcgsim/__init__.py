"""Cycle-level L1 cache simulator with prefetch-based side-channel defenses."""

from .cache import AccessResult, CacheGeometry, CacheModel, LatencyTable, Outcome, decompose, compose
from .dp import DpDefense
from .pcg import AttackAwareModule, ObservationConfusedModule, PcgDefense
from .prefetch import PrefetchQueue, StridePrefetcher, next_line
from .rng import SplitMix64
from .system import MemorySystem

__version__ = "0.1.0"
