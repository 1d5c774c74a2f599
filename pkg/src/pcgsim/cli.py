"""Command line front end.

    pcgsim simulate --config exp.json [--check] [--out DIR] [--seed N]
    pcgsim heatmap | attack | mshr-report | sweep-T [same options] [overrides]

``simulate`` runs the experiment named in the config; the other commands
force their experiment and accept a few convenience overrides.  Exit status
is 0 on success, 1 when ``--check`` is given and a configured check fails,
and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ATTACK_KINDS, ConfigError, ExperimentConfig, load_config
from .experiments import run_experiment


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p: argparse.ArgumentParser, config_required: bool):
    p.add_argument("--config", required=config_required, help="experiment JSON file")
    p.add_argument("--check", action="store_true", help="exit 1 if any configured check fails")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=_u64, help="master seed (overrides seed)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcgsim", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="run the experiment named in the config"), True)

    p = sub.add_parser("heatmap", help="256-secret Evict+Reload sweep")
    _common(p, False)
    p.add_argument("--defense", choices=["none", "pcg", "dp"])
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("attack", help="one attack pattern")
    _common(p, False)
    p.add_argument("--kind", choices=ATTACK_KINDS)
    p.add_argument("--defense", choices=["none", "pcg", "dp"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--repetitions", type=int)

    p = sub.add_parser("mshr-report", help="MSHR-miss ratios, attack vs benign traces")
    _common(p, False)

    p = sub.add_parser("sweep-T", help="PCG heat maps across AAM reset periods")
    _common(p, False)
    p.add_argument("--values", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma separated reset periods")
    p.add_argument("--rounds", type=int)
    return ap


_EXPERIMENT = {"heatmap": "heatmap", "attack": "attack", "mshr-report": "mshr-report",
               "sweep-T": "sweep-T"}


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
    over = {}
    if args.command in _EXPERIMENT:
        over["experiment"] = _EXPERIMENT[args.command]
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["output_dir"] = args.out
    if getattr(args, "defense", None):
        over["defense"] = args.defense
        over["pcg.enabled"] = args.defense == "pcg"
    if args.command == "sweep-T":
        if args.values:
            over["sweep_T.values"] = args.values
        if args.rounds:
            over["sweep_T.rounds"] = args.rounds
    else:
        if getattr(args, "rounds", None):
            over["attack.rounds"] = args.rounds
    if getattr(args, "kind", None):
        over["attack.kind"] = args.kind
    if getattr(args, "repetitions", None):
        over["attack.repetitions"] = args.repetitions
    return cfg.with_overrides(**over) if over else cfg


def _summary(report: dict) -> str:
    m = report["metrics"]
    exp = report["experiment"]
    if exp == "heatmap":
        return f"diagonal contrast {m['heatmap']['diagonal_contrast']:.4f}"
    if exp == "sweep-T":
        return "diagonal contrast " + ", ".join(f"T={k}: {v:.4f}"
                                                for k, v in m["diagonal_contrast"].items())
    if exp == "mshr-report":
        return "; ".join(f"{k} {v['mshrMissOverAccesses']:.3f}/{v['mshrMissOverMisses']:.3f}"
                         for k, v in m["workloads"].items())
    return json.dumps({k: v for k, v in m.items() if not isinstance(v, (list, dict))})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"pcgsim: config error: {exc}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(cfg)
    except (OSError, ValueError) as exc:
        print(f"pcgsim: {exc}", file=sys.stderr)
        return 2
    print(f"{report['experiment']}: {_summary(report)}")
    for c in report["checks"]:
        mark = "PASS" if c["passed"] else "FAIL"
        print(f"  [{mark}] {c['metric']} {c['op']} {c['value']} (actual {c['actual']})")
    print(f"wrote {cfg['output_dir']}/report.json")
    if args.check and not report["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
