"""Experiment orchestration: build simulators from a config, run, collect metrics and artifacts.

Every runner returns a :class:`Result`; :func:`run_experiment` writes its
artifacts plus ``report.json`` into the output directory.  Attack-heavy
experiments use the compiled engine when the configuration allows it
(``backend: auto`` and no basic prefetchers) and the object model otherwise;
both produce identical numbers.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import (
    SHUFFLE_A,
    SHUFFLE_B,
    Attacker,
    HeatMap,
    Layout,
    VictimModel,
    build_eviction_set,
    shuffle_order,
)
from .config import ExperimentConfig
from .dp import DpDefense
from .engine import Engine
from .pcg import PcgDefense
from .prefetch import StridePrefetcher
from .report import MshrReport, binomial_sf, diagonal_contrast, emit_heatmap, write_json
from .rng import SplitMix64, derive_seed
from .system import MemorySystem
from .trace import BENIGN_GENERATORS, TraceEvent, read_trace, replay, write_trace

__all__ = [
    "Result",
    "build_system",
    "build_engine",
    "AttackRunner",
    "run_heatmap",
    "run_attack",
    "run_mshr_report",
    "run_sweep_T",
    "run_trace",
    "run_experiment",
    "evaluate_checks",
]


@dataclass
class Result:
    experiment: str
    metrics: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    # name -> callable(path) writing the artifact
    artifacts: dict = field(default_factory=dict)
    heatmaps: dict = field(default_factory=dict)


def _seed(cfg: ExperimentConfig, stream: str, rep: int) -> int:
    s = cfg.component_seed(stream)
    return s if rep == 0 else derive_seed(s, rep)


def _defense_obj(cfg: ExperimentConfig, defense: str, rep: int, reset_period: int | None = None):
    g = cfg.geometry
    if defense == "pcg":
        p = cfg["pcg"]
        return PcgDefense(g, p["degree"], reset_period or p["reset_period"], _seed(cfg, "pcg", rep))
    if defense == "dp":
        return DpDefense(g, cfg["dp"]["max_degree"], _seed(cfg, "dp", rep))
    return None


def build_system(cfg: ExperimentConfig, rep: int = 0, defense: str | None = None,
                 reset_period: int | None = None, prefetchers: bool = True,
                 record: bool = False) -> MemorySystem:
    """Object-model memory system for ``cfg`` (repetition ``rep`` gets fresh seeds)."""
    defense = defense or cfg.defense
    pf = cfg["prefetchers"]
    g = cfg.geometry
    return MemorySystem(
        g,
        cfg.latency,
        cfg["replacement"],
        _seed(cfg, "cache", rep),
        _defense_obj(cfg, defense, rep, reset_period),
        next_line_degree=pf["next_line_degree"] or None if prefetchers else None,
        stride=StridePrefetcher(block_size=g.block_size) if prefetchers and pf["stride"] else None,
        drain_budget=cfg["prefetch_queue"]["drain_budget"],
        queue_drop=cfg["prefetch_queue"]["drop"],
        record=record,
    )


def build_engine(cfg: ExperimentConfig, rep: int = 0, defense: str | None = None,
                 reset_period: int | None = None) -> Engine:
    defense = defense or cfg.defense
    p = cfg["pcg"]
    return Engine(
        cfg.geometry,
        cfg.latency,
        cfg["replacement"],
        _seed(cfg, "cache", rep),
        defense,
        degree=p["degree"],
        reset_period=reset_period or p["reset_period"],
        defense_seed=_seed(cfg, "pcg" if defense == "pcg" else "dp", rep),
        dp_max_degree=cfg["dp"]["max_degree"],
        queue_drop=cfg["prefetch_queue"]["drop"],
        drain_budget=cfg["prefetch_queue"]["drain_budget"],
        attacker_seed=_seed(cfg, "attacker", rep),
    )


def _wants_engine(cfg: ExperimentConfig) -> bool:
    b = cfg["backend"]
    if b != "auto":
        return b == "engine"
    pf = cfg["prefetchers"]
    return not pf["next_line_degree"] and not pf["stride"] and cfg.geometry.num_sets <= 64


class AttackRunner:
    """Batched Evict+Reload on whichever backend the config selects."""

    def __init__(self, cfg: ExperimentConfig, rep: int = 0, defense: str | None = None,
                 reset_period: int | None = None):
        self.cfg = cfg
        self.layout = Layout(cfg.geometry)
        self.stall = cfg["attack"]["stall"]
        self.use_engine = _wants_engine(cfg)
        if self.use_engine:
            self.engine = build_engine(cfg, rep, defense, reset_period)
            self.system = None
        else:
            self.engine = None
            self.system = build_system(cfg, rep, defense, reset_period)
        self.attacker = Attacker(self.system or MemorySystem(cfg.geometry), self.layout,
                                 cfg["attack"]["hit_threshold"], self.stall,
                                 _seed(cfg, "attacker", rep))
        self._sweep = np.asarray(self.attacker._evict_sweep, dtype=np.int64)

    def run(self, secrets, orders=None, order_idx=None) -> np.ndarray:
        """Per-guess latencies, one row per attack; ``secrets[i] = -1`` means the victim idles."""
        secrets = np.asarray(secrets, dtype=np.int64)
        if orders is None:
            orders = np.arange(256, dtype=np.int64)[None, :]
        orders = np.atleast_2d(orders)
        if order_idx is None:
            order_idx = np.zeros(len(secrets), dtype=np.int64)
        if self.use_engine:
            return self.engine.run_attacks(self._sweep, self.layout.array2_base, secrets, orders,
                                           order_idx, self.stall)
        out = np.zeros((len(secrets), 256), dtype=np.int64)
        for i, s in enumerate(secrets):
            victim = VictimModel(self.layout, int(s)) if s >= 0 else None
            out[i] = self.attacker.evict_reload(victim, [int(g) for g in orders[order_idx[i]]]
                                                ).per_guess_latency
        return out

    def counters(self) -> dict:
        if self.use_engine:
            return self.engine.stats()
        c = self.system.cache.stats.as_dict()
        d = self.system.defense
        if d is not None and hasattr(d, "reclaimed"):
            c.update(noise=d.noise, reclaimed=d.reclaimed, aam_resets=d.aam.resets)
        c["queue_rejected"] = self.system.queue.rejected
        return c


def _sum_counters(into: dict, more: dict):
    for k, v in more.items():
        into[k] = into.get(k, 0) + v


def _sweep(cfg, rounds, reset_period=None, defense=None, rep=0):
    runner = AttackRunner(cfg, rep, defense, reset_period)
    hm = HeatMap()
    secrets = np.arange(256)
    for _ in range(rounds):
        lat = runner.run(secrets)
        hm.total += lat
        hm.count += 1
    return hm, runner.counters()


def _heat_metrics(mean: np.ndarray) -> dict:
    diag = np.diag(mean)
    return {
        "diagonal_contrast": diagonal_contrast(mean),
        "rows_with_diagonal_min": int((mean.argmin(axis=1) == np.arange(len(mean))).sum()),
        "mean_diagonal_latency": float(diag.mean()),
        "mean_offdiagonal_latency": float((mean.sum() - diag.sum()) / (mean.size - len(diag))),
    }


def _heat_artifacts(res: Result, name: str, cfg: ExperimentConfig, mean: np.ndarray):
    lat = cfg.latency
    res.heatmaps[name] = mean
    res.artifacts[name] = lambda out, m=mean: emit_heatmap(m, Path(out) / name, lat.l1_hit,
                                                           lat.memory)


def run_heatmap(cfg: ExperimentConfig) -> Result:
    """All 256 secrets, ``attack.rounds`` times; mean latency per (secret, guess)."""
    hm, counters = _sweep(cfg, cfg["attack"]["rounds"])
    res = Result("heatmap", {"heatmap": _heat_metrics(hm.mean)}, counters)
    res.metrics["heatmap"]["rounds"] = cfg["attack"]["rounds"]
    _heat_artifacts(res, "heatmap", cfg, hm.mean)
    return res


def _counting(cfg: ExperimentConfig, rep: int) -> tuple[np.ndarray, dict]:
    a = cfg["attack"]
    runner = AttackRunner(cfg, rep)
    orders = np.array([shuffle_order(SHUFFLE_A[t], SHUFFLE_B[t]) for t in range(a["outer"])])
    idx = np.repeat(np.arange(a["outer"]), a["inner"])
    counts = np.zeros(256, dtype=np.int64)
    secrets = np.full(a["inner"], a["secret"])
    for t in range(a["outer"]):
        lat = runner.run(secrets, orders, idx[t * a["inner"]:(t + 1) * a["inner"]])
        counts += (lat <= a["hit_threshold"]).sum(axis=0)
    return counts, runner.counters()


def run_attack(cfg: ExperimentConfig) -> Result:
    a = cfg["attack"]
    kind = a["kind"]
    res = Result("attack")
    res.metrics["kind"] = kind
    if kind == "evict_reload":
        runner = AttackRunner(cfg)
        lat = runner.run(np.full(a["rounds"], a["secret"]))
        mean = lat.mean(axis=0)
        hits = (lat <= a["hit_threshold"]).sum(axis=0)
        res.metrics.update(secret=a["secret"], rounds=a["rounds"], recovered=int(mean.argmin()),
                           secret_hits=int(hits[a["secret"]]), mean_hits=float(hits.mean()))
        res.counters = runner.counters()
        rows = ["guess,mean_latency,hits"] + [f"{g},{mean[g]:.6f},{hits[g]}" for g in range(256)]
        res.artifacts["attack"] = _text_writer("attack.csv", rows)
    elif kind == "counting":
        reps = []
        table = []
        for rep in range(a["repetitions"]):
            counts, counters = _counting(cfg, rep)
            _sum_counters(res.counters, counters)
            mu, sd = float(counts.mean()), float(counts.std(ddof=1))
            c = int(counts[a["secret"]])
            reps.append({
                "argmax": int(counts.argmax()),
                "secret_count": c,
                "mean_count": mu,
                "std_count": sd,
                "within_one_sigma": abs(c - mu) <= sd,
                "max_count": int(counts.max()),
            })
            table.append(",".join(str(int(x)) for x in counts))
        res.metrics.update(
            secret=a["secret"],
            attacks_per_repetition=a["outer"] * a["inner"],
            repetitions=reps,
            argmax_is_secret=sum(r["argmax"] == a["secret"] for r in reps),
            secret_within_one_sigma=sum(r["within_one_sigma"] for r in reps),
        )
        header = ",".join(f"g{g}" for g in range(256))
        res.artifacts["counts"] = _text_writer("counts.csv", [header] + table)
    elif kind == "recovery":
        runner = AttackRunner(cfg)
        rng = SplitMix64(cfg.component_seed("secrets"))
        secrets = np.array([rng.below(256) for _ in range(a["trials"])], dtype=np.int64)
        lat = runner.run(secrets)
        recovered = lat.argmin(axis=1)
        k = int((recovered == secrets).sum())
        n = len(secrets)
        res.metrics.update(trials=n, correct=k, accuracy=k / n, chance=1 / 256,
                           p_value=binomial_sf(k, n, 1 / 256))
        res.counters = runner.counters()
        rows = ["trial,secret,recovered"] + [f"{i},{s},{r}" for i, (s, r) in
                                             enumerate(zip(secrets, recovered))]
        res.artifacts["recovery"] = _text_writer("recovery.csv", rows)
    elif kind == "prime_probe":
        res.metrics.update(_prime_probe(cfg, res))
    elif kind == "evict_time":
        res.metrics.update(_evict_time(cfg, res))
    return res


def _prime_probe(cfg: ExperimentConfig, res: Result) -> dict:
    """Victim alternately touches / ignores its line in the attacked set."""
    a = cfg["attack"]
    system = build_system(cfg)
    layout = Layout(cfg.geometry)
    att = Attacker(system, layout, a["hit_threshold"], 0, _seed(cfg, "attacker", 0))
    target = layout.guess_addr(a["secret"])
    # priming with more lines than ways would evict the attacker's own lines
    es = build_eviction_set(target, cfg.geometry, 1, layout.evict_base)
    active = idle = 0
    n_active = (a["trials"] + 1) // 2
    for t in range(a["trials"]):
        if t % 2 == 0:
            active += att.prime_probe(es, target)
        else:
            idle += att.prime_probe(es, None)
    res.counters = system.cache.stats.as_dict()
    n_idle = a["trials"] - n_active
    return {
        "trials": a["trials"],
        "miss_rate_victim_active": active / n_active,
        "miss_rate_victim_idle": idle / n_idle if n_idle else 0.0,
    }


def _evict_time(cfg: ExperimentConfig, res: Result) -> dict:
    a = cfg["attack"]
    system = build_system(cfg)
    layout = Layout(cfg.geometry)
    att = Attacker(system, layout, a["hit_threshold"], 0, _seed(cfg, "attacker", 0))
    # 16 victim lines spread over the sets, starting at the secret's line
    addrs = [layout.guess_addr((a["secret"] + 17 * i) & 255) for i in range(16)]
    base = [att.evict_time(addrs, False) for _ in range(a["rounds"])]
    evicted = [att.evict_time(addrs, True) for _ in range(a["rounds"])]
    res.counters = system.cache.stats.as_dict()
    return {
        "rounds": a["rounds"],
        "mean_time_no_eviction": float(np.mean(base)),
        "mean_time_after_eviction": float(np.mean(evicted)),
        "gap": float(np.mean(evicted) - np.mean(base)),
    }


def attack_trace(cfg: ExperimentConfig, rounds: int) -> list[TraceEvent]:
    """Address stream of ``rounds`` Evict+Reload attacks (secret from the config)."""
    system = build_system(cfg, defense="none", prefetchers=False)
    att = Attacker(system, Layout(cfg.geometry), cfg["attack"]["hit_threshold"])
    att.trace = []
    victim = VictimModel(att.layout, cfg["attack"]["secret"])
    for _ in range(rounds):
        att.evict_reload(victim)
    return [TraceEvent(pc, addr, "R") for pc, addr in att.trace]


def run_mshr_report(cfg: ExperimentConfig) -> Result:
    """MSHR-miss ratios of the attack trace and the four benign generators.

    Each trace is replayed non-blocking, one access per cycle, on a fresh
    undefended system with the report's prefetcher setting.
    """
    m = cfg["mshr_report"]
    n = m["events"]
    wseed = cfg.component_seed("workload")
    traces = {"evict_reload": attack_trace(cfg, m["attack_rounds"])}
    for name, gen in BENIGN_GENERATORS.items():
        kw = {"seed": wseed} if name in ("random_walk", "pointer_chase") else {}
        traces[name] = list(gen(n, **kw))
    report = MshrReport()
    res = Result("mshr-report")
    g = cfg.geometry
    for name, events in traces.items():
        if not events:
            raise ValueError(f"workload {name!r} is empty")
        system = MemorySystem(
            g, cfg.latency, cfg["replacement"], cfg.component_seed("cache"),
            next_line_degree=m["next_line_degree"] or None,
            stride=StridePrefetcher(block_size=g.block_size) if m["stride"] else None,
            drain_budget=cfg["prefetch_queue"]["drain_budget"],
            queue_drop=cfg["prefetch_queue"]["drop"],
        )
        replay(system, events)
        report.add(name, system.cache.stats)
        res.counters[name] = system.cache.stats.as_dict()
        res.artifacts[f"trace_{name}"] = (
            lambda out, name=name, events=events: write_trace(Path(out) / f"{name}.trace", events,
                                                              f"workload {name}"))
    res.metrics["workloads"] = report.as_dict()
    res.artifacts["mshr_report"] = _text_writer("mshr_report.csv", report.to_csv().splitlines())
    return res


def run_sweep_T(cfg: ExperimentConfig) -> Result:
    """PCG heat maps for each reset period in ``sweep_T.values``."""
    st = cfg["sweep_T"]
    res = Result("sweep-T")
    contrasts = {}
    for T in st["values"]:
        hm, counters = _sweep(cfg, st["rounds"], reset_period=T, defense="pcg")
        mets = _heat_metrics(hm.mean)
        contrasts[str(T)] = mets["diagonal_contrast"]
        res.metrics[f"T{T}"] = mets
        res.counters[f"T{T}"] = counters
        _heat_artifacts(res, f"heatmap_T{T}", cfg, hm.mean)
    res.metrics["diagonal_contrast"] = contrasts
    res.metrics["rounds"] = st["rounds"]
    return res


def run_trace(cfg: ExperimentConfig) -> Result:
    events = read_trace(cfg["trace"]["path"])
    if not events:
        raise ValueError(f"trace {cfg['trace']['path']} has no events")
    system = build_system(cfg)
    replay(system, events, cfg["trace"]["blocking"])
    report = MshrReport()
    row = report.add("trace", system.cache.stats)
    res = Result("trace", {"trace": row.as_dict(), "cycles": system.now})
    res.counters = system.cache.stats.as_dict()
    res.counters["prefetch_sources"] = dict(system.prefetch_sources)
    return res


RUNNERS = {
    "heatmap": run_heatmap,
    "attack": run_attack,
    "mshr-report": run_mshr_report,
    "sweep-T": run_sweep_T,
    "trace": run_trace,
}


def _lookup(metrics: dict, dotted: str):
    node = metrics
    for part in dotted.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise KeyError(dotted)
    return node


_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}


def evaluate_checks(checks: list[dict], metrics: dict) -> list[dict]:
    out = []
    for c in checks:
        try:
            actual = _lookup(metrics, c["metric"])
            ok = bool(_OPS[c["op"]](actual, c["value"]))
        except KeyError:
            actual, ok = None, False
        out.append({**c, "actual": actual, "passed": ok})
    return out


def _text_writer(filename: str, rows: list[str]):
    def write(out):
        path = Path(out) / filename
        path.write_text("\n".join(rows) + "\n")
        return path
    return write


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run ``cfg.experiment``, write artifacts and ``report.json``; returns the report."""
    res = RUNNERS[cfg.experiment](cfg)
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for _, writer in sorted(res.artifacts.items()):
        paths = writer(out)
        written.extend(paths if isinstance(paths, (list, tuple)) else [paths])
    checks = evaluate_checks(cfg["checks"], res.metrics)
    report = {
        "experiment": res.experiment,
        "config": cfg.raw,
        "metrics": res.metrics,
        "counters": res.counters,
        "artifacts": sorted(Path(p).name for p in written),
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
    write_json(out / "report.json", _jsonable(report))
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
