"""Command-line harness.

    subgoal-servo gen-scenarios --task door --trials 20 --out scenarios/
    subgoal-servo run --task door --method imagine2servo --trials 20 --out runs/
    subgoal-servo ablate-n --n-values 2 4 9 --out ablation/
    subgoal-servo curves runs/imagine2servo_seed0.jsonl --out curves/
    subgoal-servo aggregate runs/*_trials.csv

Settings resolve as config file > command-line flags > defaults. The config
file is JSON with any ExperimentSpec field (task, method, trials, seed,
out_dir, workers) plus ``overrides``, a RunConfig dictionary.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import experiments as ex
from .executor import DEPTH_SOURCES, FLOW_SOURCES
from .scenarios import make_scenario

SPEC_DEFAULTS = {"task": "door", "method": "imagine2servo", "trials": 20, "seed": 0, "out_dir": None, "workers": 1}


def _add_spec_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file; its values win over flags")
    p.add_argument("--task", choices=ex.TASKS)
    if method:
        p.add_argument("--method", choices=ex.METHODS)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, help="first scenario seed")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--flow-source", choices=FLOW_SOURCES)
    p.add_argument("--depth-source", choices=DEPTH_SOURCES)
    p.add_argument("--ground-truth", action="store_true", help="ground-truth flow and depth")
    p.add_argument("--n", dest="oracle_n", type=int, help="oracle keyframes per trajectory")
    p.add_argument("--eps-p", type=float)
    p.add_argument("--eps-phi", type=float)
    p.add_argument("--max-inner-steps", type=int)
    p.add_argument("--max-total-steps", type=int)
    p.add_argument("--goal-noise", nargs=3, type=float, metavar=("SIGMA_T", "SIGMA_R_DEG", "SIGMA_PX"),
                   help="sub-goal noise: metres, degrees, 0-255 intensity")


def resolve_spec(args: argparse.Namespace) -> ex.ExperimentSpec:
    fields = dict(SPEC_DEFAULTS)
    for k in SPEC_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            fields[k] = v

    overrides: dict = {}
    if args.ground_truth:
        overrides.update(flow_source="ground-truth", depth_source="ground-truth")
    for flag, key in (
        ("flow_source", "flow_source"),
        ("depth_source", "depth_source"),
        ("eps_p", "eps_p"),
        ("eps_phi", "eps_phi"),
        ("max_inner_steps", "max_inner_steps"),
        ("max_total_steps", "max_total_steps"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    oracle = {}
    if getattr(args, "oracle_n", None) is not None:
        oracle["n"] = args.oracle_n
    if getattr(args, "goal_noise", None) is not None:
        st, sr, spx = args.goal_noise
        oracle["goal_noise"] = {"sigma_t": st, "sigma_r": math.radians(sr), "sigma_px": spx}
    if oracle:
        overrides["oracle"] = oracle

    if args.config is not None:
        cfg = json.loads(args.config.read_text())
        unknown = set(cfg) - set(SPEC_DEFAULTS) - {"overrides"}
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        fields.update({k: v for k, v in cfg.items() if k != "overrides"})
        overrides = _merge(overrides, cfg.get("overrides", {}))
    return ex.ExperimentSpec(overrides=overrides, **fields)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def cmd_gen_scenarios(args) -> int:
    spec = resolve_spec(args)
    out = Path(spec.out_dir or "scenarios")
    out.mkdir(parents=True, exist_ok=True)
    for s in spec.seeds:
        make_scenario(spec.task, s).save(out / f"{spec.task}_seed{s}.json")
    print(f"wrote {spec.trials} {spec.task} scenarios to {out}")
    return 0


def cmd_run(args) -> int:
    spec = resolve_spec(args)
    agg, _ = ex.run_experiment(spec)
    sys.stdout.write(ex.csv_text(ex.AGGREGATE_HEADER, [agg.row()]))
    return 0


def cmd_ablate_n(args) -> int:
    spec = resolve_spec(args)
    table = ex.ablate_n(spec, args.n_values)
    sys.stdout.write(ex.csv_text(("n", "success_rate"), [[str(n), f"{r:.4f}"] for n, r in table]))
    return 0


def cmd_curves(args) -> int:
    for p in ex.emit_curves(args.log, args.out):
        print(p)
    return 0


def cmd_aggregate(args) -> int:
    rows = []
    for path in args.csv:
        _, method, results = ex.read_trials_csv(path)
        rows.append(ex.aggregate(args.task, method, results).row())
    text = ex.csv_text(ex.AGGREGATE_HEADER, rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subgoal-servo", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenarios", help="write scenario JSON files")
    _add_spec_flags(p, method=False)
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("run", help="run one method over a batch of seeds")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate-n", help="success rate per oracle sampling count")
    _add_spec_flags(p, method=False)
    p.add_argument("--n-values", nargs="+", type=int, default=[2, 4, 9])
    p.set_defaults(func=cmd_ablate_n)

    p = sub.add_parser("curves", help="photometric and speed curves of one trial log")
    p.add_argument("log", type=Path)
    p.add_argument("--out", type=Path, default=Path("curves"))
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("aggregate", help="summary rows from per-trial CSVs")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--task", choices=ex.TASKS, default="door")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_aggregate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
