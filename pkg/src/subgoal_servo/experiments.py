"""Batch evaluation: methods, baselines, n-ablation, and CSV emission.

Every arm of an experiment runs on the same scenario seeds. Trials can fan
out over worker processes; results are merged in seed order, so outputs are
byte-identical whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .executor import RunConfig, Simulation, TrialResult, inner_servo, read_jsonl, run_trial
from .flow import photometric_error
from .foresight import KeyframeOracle
from .geometry import Twist
from .scenarios import Scenario, make_scenario
from .scene import render

METHODS = ("imagine2servo", "rtvs-final", "cam-axis")
TASKS = ("door", "reach")
TRIAL_HEADER = ("seed", "method", "outcome", "trans_err_m", "rot_err", "steps", "collisions")
AGGREGATE_HEADER = (
    "task",
    "method",
    "trials",
    "success_rate",
    "mean_trans_err_m",
    "mean_rot_err",
    "mean_steps",
    "collision_rate",
)


@dataclass(frozen=True)
class ExperimentSpec:
    task: str = "door"
    method: str = "imagine2servo"
    trials: int = 20
    seed: int = 0  # first scenario seed; trial i uses seed + i
    overrides: dict = field(default_factory=dict)  # RunConfig.from_dict keys
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.trials))

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.overrides)


@dataclass(frozen=True)
class AggregateMetrics:
    """Means of pose error and steps are over non-collision trials, timeouts
    and degenerate-flow stops included at their final pose. With no such
    trial they are NaN."""

    task: str
    method: str
    trials: int
    success_rate: float
    mean_trans_err: float
    mean_rot_err: float
    mean_steps: float
    collision_rate: float

    def row(self) -> list[str]:
        return [
            self.task,
            self.method,
            str(self.trials),
            f"{self.success_rate:.4f}",
            f"{self.mean_trans_err:.6f}",
            f"{self.mean_rot_err:.6f}",
            f"{self.mean_steps:.2f}",
            f"{self.collision_rate:.4f}",
        ]


def aggregate(task: str, method: str, results: list[TrialResult]) -> AggregateMetrics:
    if not results:
        raise ValueError("no trials to aggregate")
    n = len(results)
    kept = [r for r in results if not r.collided]
    mean = (lambda xs: float(np.mean(xs))) if kept else (lambda xs: float("nan"))
    return AggregateMetrics(
        task,
        method,
        n,
        sum(r.success for r in results) / n,
        mean([r.trans_err for r in kept]),
        mean([r.rot_err for r in kept]),
        mean([r.steps for r in kept]),
        sum(r.collided for r in results) / n,
    )


# --- baselines ---------------------------------------------------------------


def rtvs_final_baseline(scenario: Scenario, cfg: RunConfig) -> TrialResult:
    """Servo straight at the clean final keyframe render, with the whole step budget."""
    sim = Simulation(scenario, cfg)
    if sim.collided:
        return sim.finish()
    goal = render(scenario.scene, scenario.goal, scenario.intrinsics)[0]
    inner_servo(goal, sim, cfg, subgoal_pose=scenario.goal, max_steps=cfg.max_total_steps)
    return sim.finish(1)


def cam_axis_baseline(scenario: Scenario, cfg: RunConfig) -> TrialResult:
    """Constant forward twist along the optical axis at the linear speed cap.

    Door: stop once the body is a full radius past the door plane, on a
    collision, or when the budget runs out. Reach: stop at the first step
    where the photometric error to the final keyframe render stops falling.
    """
    sim = Simulation(scenario, cfg)
    if sim.collided:
        return sim.finish()
    twist = Twist((0.0, 0.0, cfg.solver.max_linear), (0.0, 0.0, 0.0))
    goal = render(scenario.scene, scenario.goal, scenario.intrinsics)[0]
    door = scenario.door
    err = photometric_error(goal, sim.image)
    while sim.budget_left > 0 and not sim.collided:
        if door is not None and door.signed_distance(sim.pose.translation) >= cfg.body.radius:
            break
        rec = sim.execute(twist, goal, 0)
        if door is None:
            if rec.photometric_error > err:
                break
            err = rec.photometric_error
    return sim.finish(0)


def run_method(scenario: Scenario, method: str, cfg: RunConfig) -> TrialResult:
    if method == "imagine2servo":
        return run_trial(scenario, cfg, KeyframeOracle(scenario, cfg.oracle))
    if method == "rtvs-final":
        return rtvs_final_baseline(scenario, cfg)
    if method == "cam-axis":
        return cam_axis_baseline(scenario, cfg)
    raise ValueError(f"unknown method {method!r}")


# --- batch execution ---------------------------------------------------------


def _trial_job(args: tuple) -> TrialResult:
    task, seed, method, cfg_dict = args
    return run_method(make_scenario(task, seed), method, RunConfig.from_dict(cfg_dict))


def run_trials(task: str, method: str, seeds: list[int], cfg: RunConfig, workers: int = 1) -> list[TrialResult]:
    """Results in the order of ``seeds``."""
    jobs = [(task, s, method, cfg.to_dict()) for s in seeds]
    if workers == 1 or len(jobs) == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))


def trial_rows(seeds: list[int], method: str, results: list[TrialResult]) -> list[list[str]]:
    return [
        [str(s), method, r.outcome, f"{r.trans_err:.6f}", f"{r.rot_err:.6f}", str(r.steps), str(int(r.collided))]
        for s, r in zip(seeds, results)
    ]


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_experiment(spec: ExperimentSpec) -> tuple[AggregateMetrics, list[TrialResult]]:
    """Run all trials of ``spec``; with ``out_dir`` set, write logs and CSVs.

    Files: ``<method>_seed<k>.jsonl`` per trial, ``<method>_trials.csv`` with
    one row per trial and ``<method>_aggregate.csv`` with the summary row.
    """
    cfg = spec.run_config()
    results = run_trials(spec.task, spec.method, spec.seeds, cfg, spec.workers)
    agg = aggregate(spec.task, spec.method, results)
    if spec.out_dir is not None:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, r in zip(spec.seeds, results):
            r.write_jsonl(out / f"{spec.method}_seed{s}.jsonl")
        (out / f"{spec.method}_trials.csv").write_text(csv_text(TRIAL_HEADER, trial_rows(spec.seeds, spec.method, results)))
        (out / f"{spec.method}_aggregate.csv").write_text(csv_text(AGGREGATE_HEADER, [agg.row()]))
    return agg, results


def ablate_n(spec: ExperimentSpec, n_values: list[int]) -> list[tuple[int, float]]:
    """Success rate of the sub-goal method per oracle sampling count, paired seeds."""
    if any(n < 2 for n in n_values):
        raise ValueError("every n must be >= 2")
    table = []
    for n in n_values:
        oracle = {**spec.overrides.get("oracle", {}), "n": n}
        arm = replace(
            spec,
            method="imagine2servo",
            overrides={**spec.overrides, "oracle": oracle},
            out_dir=None if spec.out_dir is None else str(Path(spec.out_dir) / f"n{n}"),
        )
        agg, _ = run_experiment(arm)
        table.append((n, agg.success_rate))
    if spec.out_dir is not None:
        rows = [[str(n), f"{r:.4f}"] for n, r in table]
        Path(spec.out_dir, "ablate_n.csv").write_text(csv_text(("n", "success_rate"), rows))
    return table


def read_trials_csv(path) -> tuple[list[int], str, list[TrialResult]]:
    """Parse a per-trial CSV back into (seeds, method, results without step logs)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRIAL_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        seeds, methods, results = [], set(), []
        for row in reader:
            seed, method, outcome, t, r, steps, _ = row
            seeds.append(int(seed))
            methods.add(method)
            results.append(TrialResult(outcome, float(t), float(r), int(steps), ()))
    if len(methods) != 1:
        raise ValueError(f"{path}: expected a single method, got {sorted(methods)}")
    return seeds, methods.pop(), results


# --- curves ------------------------------------------------------------------

CURVE_FILES = {
    "photometric": ("photometric_error", lambda r: r.photometric_error),
    "linear_speed": ("linear_speed", lambda r: r.twist.linear_speed),
    "angular_speed": ("angular_speed", lambda r: r.twist.angular_speed),
}


def curve_rows(result: TrialResult) -> dict[str, list[list[str]]]:
    """Per-curve rows ``step, subgoal, boundary, value``.

    ``boundary`` is 1 on the first step servoing towards a new sub-goal.
    """
    out = {k: [] for k in CURVE_FILES}
    prev = None
    for rec in result.records:
        boundary = int(prev is not None and rec.subgoal != prev)
        prev = rec.subgoal
        for key, (_, get) in CURVE_FILES.items():
            out[key].append([str(rec.step), str(rec.subgoal), str(boundary), repr(float(get(rec)))])
    return out


def emit_curves(log_path, out_dir) -> list[Path]:
    """Write the photometric-error and speed curves of one trial log."""
    result = read_jsonl(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(log_path).stem
    paths = []
    for key, rows in curve_rows(result).items():
        col = CURVE_FILES[key][0]
        p = out / f"{stem}_{key}.csv"
        p.write_text(csv_text(("step", "subgoal", "boundary", col), rows))
        paths.append(p)
    return paths


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


def dump_spec(spec: ExperimentSpec) -> str:
    return json.dumps(
        {
            "task": spec.task,
            "method": spec.method,
            "trials": spec.trials,
            "seed": spec.seed,
            "overrides": spec.overrides,
            "out_dir": spec.out_dir,
            "workers": spec.workers,
        },
        sort_keys=True,
    )
