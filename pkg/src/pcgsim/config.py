"""Experiment configuration: one JSON document, validated up front.

Unknown keys are rejected so that typos fail before any simulation runs.
Every seed is explicit; component seeds not given in the file are derived
from the master ``seed``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .cache import CacheGeometry, LatencyTable
from .rng import derive_seed

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "DEFAULTS", "EXPERIMENTS"]

EXPERIMENTS = ("heatmap", "attack", "mshr-report", "sweep-T", "trace")
ATTACK_KINDS = ("evict_reload", "counting", "recovery", "prime_probe", "evict_time")
CHECK_OPS = ("<", "<=", ">", ">=", "==", "!=")

DEFAULTS: dict[str, Any] = {
    "experiment": "heatmap",
    "seed": 1,
    "output_dir": "out",
    "backend": "auto",
    "geometry": {
        "num_sets": 64,
        "num_ways": 4,
        "block_size": 64,
        "mshr_entries": 4,
        "prefetch_queue_capacity": 32,
    },
    "latency": {"l1_hit": 3, "l2_hit": 40, "memory": 100},
    "replacement": "lru",
    "prefetchers": {"next_line_degree": 0, "stride": False},
    "prefetch_queue": {"drop": "oldest", "drain_budget": 1},
    "defense": None,
    "pcg": {"enabled": False, "degree": 4, "reset_period": 10000, "rng_seed": None},
    "dp": {"max_degree": 10, "rng_seed": None},
    "attack": {
        "kind": "evict_reload",
        "secret": 115,
        "rounds": 1,
        "stall": 0,
        "hit_threshold": 35,
        "outer": 100,
        "inner": 100,
        "repetitions": 1,
        "trials": 10000,
    },
    "mshr_report": {
        "events": 10000,
        "attack_rounds": 8,
        "next_line_degree": 4,
        "stride": True,
    },
    "sweep_T": {"values": [1000, 10000, 50000], "rounds": 20},
    "trace": {"path": None, "blocking": False},
    "checks": [],
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _int(d: dict, key: str, where: str, lo: int | None = None) -> int:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where}.{key} must be >= {lo}, got {v}")
    return v


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    # -- accessors --------------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def defense(self) -> str:
        return self.raw["defense"]

    @property
    def geometry(self) -> CacheGeometry:
        return CacheGeometry(**self.raw["geometry"])

    @property
    def latency(self) -> LatencyTable:
        return LatencyTable(**self.raw["latency"])

    def component_seed(self, stream: str) -> int:
        """Seed for one random stream; explicit ``rng_seed`` entries win."""
        if stream == "pcg" and self.raw["pcg"]["rng_seed"] is not None:
            return self.raw["pcg"]["rng_seed"]
        if stream == "dp" and self.raw["dp"]["rng_seed"] is not None:
            return self.raw["dp"]["rng_seed"]
        return derive_seed(self.seed, _STREAMS[stream])

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``with_overrides(**{"pcg.reset_period": 1000})``."""
        raw = copy.deepcopy(self.raw)
        for dotted, v in changes.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = v
        cfg = ExperimentConfig(raw)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    # -- validation -------------------------------------------------------

    def validate(self):
        r = self.raw
        if r["experiment"] not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {r['experiment']!r}")
        seed = _int(r, "seed", "config", 0)
        if seed >= 1 << 64:
            raise ConfigError("seed must fit in 64 bits")
        if not isinstance(r["output_dir"], str):
            raise ConfigError("output_dir must be a string")
        if r["backend"] not in ("auto", "engine", "reference"):
            raise ConfigError(f"backend must be auto, engine or reference, got {r['backend']!r}")
        try:
            geom = self.geometry
            self.latency
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid geometry/latency: {exc}") from None
        if r["replacement"] not in ("lru", "random"):
            raise ConfigError(f"replacement must be lru or random, got {r['replacement']!r}")
        pf = r["prefetchers"]
        _int(pf, "next_line_degree", "prefetchers", 0)
        if not isinstance(pf["stride"], bool):
            raise ConfigError("prefetchers.stride must be true or false")
        q = r["prefetch_queue"]
        if q["drop"] not in ("oldest", "newest"):
            raise ConfigError(f"prefetch_queue.drop must be oldest or newest, got {q['drop']!r}")
        _int(q, "drain_budget", "prefetch_queue", 1)

        pcg = r["pcg"]
        if not isinstance(pcg["enabled"], bool):
            raise ConfigError("pcg.enabled must be true or false")
        _int(pcg, "degree", "pcg", 1)
        _int(pcg, "reset_period", "pcg", 1)
        if pcg["rng_seed"] is not None:
            _int(pcg, "rng_seed", "pcg", 0)
        _int(r["dp"], "max_degree", "dp", 1)
        if r["dp"]["rng_seed"] is not None:
            _int(r["dp"], "rng_seed", "dp", 0)
        d = r["defense"]
        if d is None:
            r["defense"] = d = "pcg" if pcg["enabled"] else "none"
        if d not in ("none", "pcg", "dp"):
            raise ConfigError(f"defense must be none, pcg or dp, got {d!r}")
        if pcg["enabled"] and d != "pcg":
            raise ConfigError(f"pcg.enabled is true but defense is {d!r}")
        pcg["enabled"] = d == "pcg"

        a = r["attack"]
        if a["kind"] not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind must be one of {ATTACK_KINDS}, got {a['kind']!r}")
        secret = _int(a, "secret", "attack", 0)
        if secret > 255:
            raise ConfigError("attack.secret must be a byte (0..255)")
        for k in ("rounds", "outer", "inner", "repetitions", "trials"):
            _int(a, k, "attack", 1)
        _int(a, "stall", "attack", 0)
        _int(a, "hit_threshold", "attack", 0)
        if a["outer"] > 100:
            raise ConfigError("attack.outer is limited to the 100 configured shuffle primes")

        m = r["mshr_report"]
        _int(m, "events", "mshr_report", 10_000)
        _int(m, "attack_rounds", "mshr_report", 1)
        _int(m, "next_line_degree", "mshr_report", 0)
        st = r["sweep_T"]
        if not st["values"] or not all(isinstance(v, int) and v >= 1 for v in st["values"]):
            raise ConfigError("sweep_T.values must be a non-empty list of positive integers")
        _int(st, "rounds", "sweep_T", 1)
        if r["experiment"] == "trace" and not r["trace"]["path"]:
            raise ConfigError("experiment 'trace' needs trace.path")

        uses_engine = r["backend"] == "engine"
        if uses_engine and (pf["next_line_degree"] or pf["stride"]):
            raise ConfigError("the compiled backend does not model the basic prefetchers")
        if uses_engine and geom.num_sets > 64:
            raise ConfigError("the compiled backend supports at most 64 sets")
        if not isinstance(r["checks"], list):
            raise ConfigError("checks must be a list")
        for i, c in enumerate(r["checks"]):
            if not isinstance(c, dict) or set(c) != {"metric", "op", "value"}:
                raise ConfigError(f"checks[{i}] must have exactly metric, op and value")
            if c["op"] not in CHECK_OPS:
                raise ConfigError(f"checks[{i}].op must be one of {CHECK_OPS}")


_STREAMS = {"cache": 1, "pcg": 2, "dp": 3, "attacker": 4, "secrets": 5, "workload": 6}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(data)
