"""The ten acceptance criteria, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict (shown in the terminal
summary) before asserting, so a failing criterion still reports its numbers.
"""

import time

from oracles import BruteAam, closest_zero, survive_probability
from pcgsim import CacheGeometry, MemorySystem, PcgDefense, StridePrefetcher
from pcgsim.attack import CHASE_PC, Attacker, build_eviction_set, chase_order
from pcgsim.cache import compose, decompose
from pcgsim.config import ExperimentConfig
from pcgsim.experiments import run_experiment
from pcgsim.pcg import AttackAwareModule, ObservationConfusedModule
from pcgsim.rng import SplitMix64, derive_seed

SECRET = 115


def _cfg(**over):
    return ExperimentConfig.from_dict({}).with_overrides(**over)


# -- 1 ---------------------------------------------------------------------

def test_eviction_rate_random_replacement(acceptance):
    t0 = time.perf_counter()
    geom = CacheGeometry()
    target = 0x1000_0000 + 7 * geom.block_size
    es = build_eviction_set(target, geom, 4)
    fillers = build_eviction_set(target, geom, 1, base=0x6000_0000).addresses[:geom.num_ways - 1]
    assert len(es) == 16
    trials = 10_000
    evicted = 0
    tb = target >> geom.offset_bits
    for t in range(trials):
        sys_ = MemorySystem(geom, policy="random", seed=derive_seed(2024, t))
        for a in [target, *fillers]:
            sys_.measure(a)
        for a in es:
            sys_.measure(a)
        evicted += not sys_.cache.is_resident(tb)
    rate = evicted / trials
    expected = 1 - survive_probability(geom.num_ways, len(es))
    elapsed = time.perf_counter() - t0
    ok = abs(rate - 0.99) <= 0.01 and elapsed < 10
    acceptance(1, ok, f"eviction rate {rate:.4f} (analytic {expected:.4f}), {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------

def test_mshr_discrimination(acceptance, tmp_path):
    t0 = time.perf_counter()
    report = run_experiment(_cfg(experiment="mshr-report"), tmp_path)
    w = report["metrics"]["workloads"]
    elapsed = time.perf_counter() - t0
    att = w["evict_reload"]
    benign = {k: v["mshrMissOverMisses"] for k, v in w.items() if k != "evict_reload"}
    ok = (att["mshrMissOverAccesses"] > 0.20 and att["mshrMissOverMisses"] > 0.96
          and len(benign) == 4 and all(v < 0.60 for v in benign.values()) and elapsed < 30)
    detail = (f"attack {att['mshrMissOverAccesses']:.3f}/{att['mshrMissOverMisses']:.3f}; benign "
              + ", ".join(f"{k} {v:.3f}" for k, v in benign.items()) + f"; {elapsed:.1f}s")
    acceptance(2, ok, detail)
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_baseline_leak(acceptance, tmp_path):
    t0 = time.perf_counter()
    report = run_experiment(_cfg(defense="none", **{"attack.rounds": 1}), tmp_path)
    c = report["metrics"]["heatmap"]["diagonal_contrast"]
    elapsed = time.perf_counter() - t0
    ok = c >= 0.95 and elapsed < 60
    acceptance(3, ok, f"diagonal contrast {c:.4f}, {elapsed:.1f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_pcg_defense(acceptance, tmp_path):
    t0 = time.perf_counter()
    base = _cfg(defense="pcg", **{"pcg.reset_period": 10000, "pcg.degree": 4})
    one = run_experiment(base.with_overrides(**{"attack.rounds": 1}), tmp_path / "r1")
    hundred = run_experiment(base.with_overrides(**{"attack.rounds": 100}), tmp_path / "r100")
    rec = run_experiment(base.with_overrides(experiment="attack", **{
        "attack.kind": "recovery", "attack.trials": 1000}), tmp_path / "rec")
    elapsed = time.perf_counter() - t0
    c1 = one["metrics"]["heatmap"]["diagonal_contrast"]
    c100 = hundred["metrics"]["heatmap"]["diagonal_contrast"]
    m = rec["metrics"]
    ok = c1 <= 0.02 and c100 <= 0.02 and m["p_value"] > 0.01 and elapsed < 1800
    acceptance(4, ok, f"contrast 1 round {c1:.4f}, 100 rounds {c100:.4f}; recovery "
                      f"{m['correct']}/{m['trials']} p={m['p_value']:.3f}; {elapsed:.0f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_breaking_dp(acceptance, tmp_path):
    t0 = time.perf_counter()
    over = {"attack.kind": "counting", "attack.secret": SECRET, "attack.repetitions": 10}
    dp = run_experiment(_cfg(experiment="attack", defense="dp", **over), tmp_path / "dp")
    pcg = run_experiment(_cfg(experiment="attack", defense="pcg", **over), tmp_path / "pcg")
    elapsed = time.perf_counter() - t0
    hit = dp["metrics"]["argmax_is_secret"]
    near = pcg["metrics"]["secret_within_one_sigma"]
    assert dp["metrics"]["attacks_per_repetition"] == 10_000
    ok = hit >= 9 and near >= 9 and elapsed < 1800
    acceptance(5, ok, f"dp argmax=secret in {hit}/10; pcg secret within 1 sd in {near}/10; "
                      f"{elapsed:.0f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------

def _aam_stream(rng: SplitMix64, sets: int, period: int, events: int, max_gap: int):
    out = []
    now = 0
    for _ in range(events):
        now += rng.below(max_gap + 1)
        out.append((now, 1 + rng.below(3), rng.below(sets)))
    return out


def _aam_agrees(sets, ways, period, stream) -> bool:
    aam = AttackAwareModule(sets, ways, period)
    ref = BruteAam(sets, ways, period)
    for now, pc, s in stream:
        aam.advance(now)
        ref.run_to(now)
        aam.observe(pc, s)
        ref.miss(pc, s)
        if aam.counters != ref.count or aam.danger != ref.danger() or aam.cnt != ref.cnt:
            return False
    return True


def test_aam_semantics(acceptance):
    t0 = time.perf_counter()
    S, W = 8, 2
    rng = SplitMix64(6)
    bad = 0
    saw_flag = saw_reset = 0
    n = 100_000
    for i in range(n):
        period = (1, 2, 3, 5, 8, 13)[rng.below(6)]
        stream = _aam_stream(rng, S, period, 10, 2 * period)
        bad += not _aam_agrees(S, W, period, stream)
        if i % 97 == 0:
            aam = AttackAwareModule(S, W, period)
            for now, pc, s in stream:
                aam.advance(now)
                aam.observe(pc, s)
                saw_flag += aam.danger != 0
            saw_reset += aam.resets > 0
    # long gaps around the 16-bit wrap of the period counter
    for i in range(60):
        period = (7, 1000, 40000, 65535, 70000)[i % 5]
        stream = _aam_stream(rng, S, period, 6, 30000)
        bad += not _aam_agrees(S, W, period, stream)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and saw_flag > 0 and saw_reset > 0 and elapsed < 60
    acceptance(6, ok, f"{n + 60} streams, {bad} mismatches vs brute force; {elapsed:.1f}s")
    assert ok


# -- 7 ---------------------------------------------------------------------

def _rand_vec(rng: SplitMix64, width: int, density: int) -> int:
    v = 0
    for i in range(width):
        if rng.below(8) < density:
            v |= 1 << i
    return v


def test_balanced_set_properties(acceptance):
    t0 = time.perf_counter()
    geom = CacheGeometry()
    S = geom.num_sets
    full = (1 << S) - 1
    rng = SplitMix64(7)
    failures = []
    n = 100_000
    abnormal_cases = 0
    for i in range(n):
        ocm = ObservationConfusedModule(geom, 4, i)
        epoch_danger = _rand_vec(rng, S, rng.below(3))
        consumed = _rand_vec(rng, S, rng.below(9))
        ocm.ref_set = full if rng.below(16) == 0 else _rand_vec(rng, S, rng.below(9))
        ocm.dan_set = (~epoch_danger & full) | consumed
        danger = _rand_vec(rng, S, rng.below(3))
        t_set = rng.below(S)
        if ocm.ref_set == full:
            epoch_danger = danger
            ref_before, dan_before = 0, ~danger & full
        else:
            ref_before, dan_before = ocm.ref_set, ocm.dan_set
        consulted = dan_before if dan_before != full else ref_before
        tag, off = rng.below(1 << 20), rng.below(geom.block_size)
        raw = compose(tag, t_set, off, geom)
        block = ocm.balance_block(raw >> geom.offset_bits, danger)
        a = decompose(block << geom.offset_bits | off, geom)
        s = a.index
        if consulted >> s & 1:
            failures.append(("consulted bit set", i))
        if s != closest_zero(consulted, t_set, S):
            failures.append(("not closest", i))
        if dan_before != full:
            abnormal_cases += 1
            if not epoch_danger >> s & 1:
                failures.append(("not abnormal", i))
        if a.tag != tag or a.offset != off:
            failures.append(("tag/offset changed", i))
        if i % 50 == 0:
            # run on to the next refSet reset; picks from one vector never repeat
            picks = {"dan": [s] if dan_before != full else [], "ref": [] if dan_before != full else [s]}
            epochs = ocm.epochs
            while ocm.epochs == epochs:
                fs, branch = ocm.balanced_set(rng.below(S), danger)
                if ocm.epochs != epochs:
                    break
                picks[branch].append(fs)
            for branch, seq in picks.items():
                if len(seq) != len(set(seq)):
                    failures.append((f"repeat in {branch}", i))
    elapsed = time.perf_counter() - t0
    ok = not failures and abnormal_cases > 1000 and elapsed < 60
    acceptance(7, ok, f"{n} states ({abnormal_cases} with abnormal sets pending), "
                      f"{len(failures)} violations; {elapsed:.1f}s")
    assert ok, failures[:5]


# -- 8 ---------------------------------------------------------------------

def test_pointer_chase_insuppressible(acceptance):
    t0 = time.perf_counter()
    geom = CacheGeometry()
    es = build_eviction_set(0x1000_0000 + 9 * geom.block_size, geom, 4)
    chased = chase_order(es, seed=3)

    def traverse(order, defense):
        stride = StridePrefetcher(block_size=geom.block_size)
        sys_ = MemorySystem(geom, policy="lru", defense=defense, stride=stride)
        att = Attacker(sys_)
        bursts = []
        for _ in range(20):
            m0 = sys_.cache.stats.misses
            n0 = defense.noise if defense else 0
            att.chase(order, CHASE_PC)
            bursts.append((sys_.cache.stats.misses - m0, (defense.noise if defense else 0) - n0))
        return stride.fired, bursts

    seq_fired, _ = traverse(es, None)
    pcg = PcgDefense(geom, 4, 10000, seed=5)
    chase_fired, bursts = traverse(chased, pcg)
    per_miss_ok = all(misses > 0 and noise >= 4 * misses for misses, noise in bursts)
    elapsed = time.perf_counter() - t0
    ok = chase_fired == 0 and seq_fired > 0 and per_miss_ok and elapsed < 10
    total_m = sum(b[0] for b in bursts)
    total_n = sum(b[1] for b in bursts)
    acceptance(8, ok, f"stride prefetches: chase {chase_fired}, sequential {seq_fired}; PCG "
                      f"{total_n} prefetches for {total_m} misses; {elapsed:.1f}s")
    assert ok


# -- 9 ---------------------------------------------------------------------

_DETERMINISM = {
    "heatmap-pcg": dict(defense="pcg", **{"attack.rounds": 2}),
    "heatmap-reference": dict(defense="dp", backend="reference", **{"attack.rounds": 1}),
    "mshr-report": dict(experiment="mshr-report"),
    "counting": dict(experiment="attack", defense="dp", **{
        "attack.kind": "counting", "attack.outer": 3, "attack.inner": 5, "attack.repetitions": 2}),
    "sweep-T": dict(experiment="sweep-T", **{"sweep_T.values": [1000, 50000], "sweep_T.rounds": 1}),
}


def test_determinism(acceptance, tmp_path):
    diffs = []
    for name, over in _DETERMINISM.items():
        cfg = _cfg(**over)
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        files = sorted(p.name for p in a.iterdir())
        assert "report.json" in files
        if files != sorted(p.name for p in b.iterdir()):
            diffs.append(f"{name}: file lists differ")
        for f in files:
            if (a / f).read_bytes() != (b / f).read_bytes():
                diffs.append(f"{name}/{f}")
    ok = not diffs
    acceptance(9, ok, f"{len(_DETERMINISM)} configs run twice, {len(diffs)} differing artifacts")
    assert ok, diffs


# -- 10 --------------------------------------------------------------------

def test_reset_period_sensitivity(acceptance, tmp_path):
    t0 = time.perf_counter()
    report = run_experiment(_cfg(experiment="sweep-T", **{"sweep_T.values": [1000, 10000, 50000]}),
                            tmp_path)
    c = report["metrics"]["diagonal_contrast"]
    elapsed = time.perf_counter() - t0
    ok = c["1000"] > c["10000"] and elapsed < 1200
    acceptance(10, ok, "diagonal contrast " + ", ".join(f"T={k} {v:.4f}" for k, v in c.items())
               + f"; {elapsed:.0f}s")
    assert ok

