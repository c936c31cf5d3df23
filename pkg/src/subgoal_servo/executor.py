"""Alternating sub-goal / servo execution in the planar-scene simulator.

Outer loop: ask the foresight model for a sub-goal, servo to it, ask again,
and stop once two consecutive sub-goals are photometrically identical (below
``eps_p``). Inner loop: while the photometric error to the sub-goal is at
least ``eps_phi``, estimate flow to the sub-goal, form depth, solve for the
twist, integrate it for ``dt``, re-render and check for collisions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .flow import FlowEstimatorConfig, estimate_flow, photometric_error
from .foresight import Foresight, ForesightRequest, KeyframeOracle, OracleConfig, GoalNoise
from .geometry import Pose, Twist, integrate_twist, pose_error
from .ibvs import DegenerateFlowError, SolverConfig, motion_depth, nominal_depth, solve_velocity
from .images import DepthMap, ImageBuffer
from .scenarios import Scenario
from .scene import CollisionBody, check_collision, ground_truth_flow, render

log = logging.getLogger(__name__)

SUCCESS_TRANS = 0.03  # m
SUCCESS_ROT = 0.03  # quaternion-difference norm

OUTCOMES = ("success", "collision", "timeout", "degenerate-flow")
FLOW_SOURCES = ("estimated", "ground-truth")
DEPTH_SOURCES = ("flowdepth", "ground-truth")


@dataclass(frozen=True)
class RunConfig:
    eps_p: float = 1.0
    eps_phi: float = 2.0
    dt: float = 0.05
    max_inner_steps: int = 150
    max_total_steps: int = 2000
    flow_source: str = "estimated"
    depth_source: str = "flowdepth"
    solver: SolverConfig = field(default_factory=SolverConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    flow: FlowEstimatorConfig = field(default_factory=FlowEstimatorConfig)
    body: CollisionBody = field(default_factory=CollisionBody)

    def __post_init__(self):
        if not (self.eps_p > 0 and self.eps_phi > 0):
            raise ValueError("thresholds must be positive")
        if not (self.max_inner_steps > 0 and self.max_total_steps > 0):
            raise ValueError("step limits must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError(f"flow_source must be one of {FLOW_SOURCES}")
        if self.depth_source not in DEPTH_SOURCES:
            raise ValueError(f"depth_source must be one of {DEPTH_SOURCES}")

    def ground_truth(self) -> RunConfig:
        return replace(self, flow_source="ground-truth", depth_source="ground-truth")

    def to_dict(self) -> dict:
        return {
            "eps_p": self.eps_p,
            "eps_phi": self.eps_phi,
            "dt": self.dt,
            "max_inner_steps": self.max_inner_steps,
            "max_total_steps": self.max_total_steps,
            "flow_source": self.flow_source,
            "depth_source": self.depth_source,
            "solver": self.solver.to_dict(),
            "oracle": self.oracle.to_dict(),
            "flow": self.flow.to_dict(),
            "body": {"radius": self.body.radius, "height": self.body.height},
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        base = cls()
        kw = {k: d[k] for k in ("eps_p", "eps_phi", "dt", "max_inner_steps", "max_total_steps", "flow_source", "depth_source") if k in d}
        if "solver" in d:
            kw["solver"] = replace(base.solver, **d["solver"])
        if "oracle" in d:
            kw["oracle"] = OracleConfig.from_dict({**base.oracle.to_dict(), **d["oracle"]})
        if "flow" in d:
            kw["flow"] = replace(base.flow, **d["flow"])
        if "body" in d:
            kw["body"] = CollisionBody(**d["body"])
        return cls(**kw)


@dataclass(frozen=True)
class StepRecord:
    step: int
    pose: Pose
    twist: Twist
    photometric_error: float
    subgoal: int
    collision: bool

    def to_json(self) -> dict:
        return {
            "type": "step",
            "step": self.step,
            "pose": self.pose.to_tuple(),
            "twist": [float(v) for v in self.twist.as_vector()],
            "photometric_error": self.photometric_error,
            "subgoal": self.subgoal,
            "collision": self.collision,
        }

    @classmethod
    def from_json(cls, d: dict) -> StepRecord:
        return cls(
            int(d["step"]),
            Pose.from_tuple(d["pose"]),
            Twist.from_vector(d["twist"]),
            float(d["photometric_error"]),
            int(d["subgoal"]),
            bool(d["collision"]),
        )


@dataclass(frozen=True, eq=False)
class TrialResult:
    outcome: str
    trans_err: float
    rot_err: float
    steps: int
    records: tuple[StepRecord, ...]
    subgoals: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    @property
    def collided(self) -> bool:
        return self.outcome == "collision"

    def summary_json(self) -> dict:
        return {
            "type": "result",
            "outcome": self.outcome,
            "trans_err": self.trans_err,
            "rot_err": self.rot_err,
            "steps": self.steps,
            "subgoals": self.subgoals,
        }

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(r.to_json()) for r in self.records]
        lines.append(json.dumps(self.summary_json()))
        Path(path).write_text("\n".join(lines) + "\n")


def read_jsonl(path) -> TrialResult:
    records, summary = [], None
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            if d.get("type") == "step":
                records.append(StepRecord.from_json(d))
            elif d.get("type") == "result":
                summary = d
            else:
                raise ValueError(f"unknown record type {d.get('type')!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: malformed log line ({exc})") from exc
    if summary is None:
        raise ValueError(f"{path}: missing trailing result line")
    return TrialResult(
        summary["outcome"], float(summary["trans_err"]), float(summary["rot_err"]), int(summary["steps"]), tuple(records), int(summary.get("subgoals", 0))
    )


class Simulation:
    """Mutable trial state: current pose and observation, step log, collision flag."""

    def __init__(self, scenario: Scenario, cfg: RunConfig):
        self.scenario = scenario
        self.cfg = cfg
        self.pose = scenario.start
        self.image, self.depth = render(scenario.scene, self.pose, scenario.intrinsics)
        self.records: list[StepRecord] = []
        self.collided = check_collision(scenario.scene, cfg.body, self.pose)
        self.degenerate = False
        self.positions = [self.pose.translation]
        # previous observation and the motion since, for depth from motion
        self.prev_pose: Pose | None = None
        self.prev_image: ImageBuffer | None = None
        self.last_motion: Twist | None = None
        self.depth_estimate: DepthMap | None = None

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def budget_left(self) -> int:
        return self.cfg.max_total_steps - self.steps

    def execute(self, twist: Twist, error_to: ImageBuffer | None, subgoal: int) -> StepRecord:
        sc = self.scenario
        lin_cap, ang_cap = self.cfg.solver.max_linear, self.cfg.solver.max_angular
        if twist.linear_speed > lin_cap * (1 + 1e-9) or twist.angular_speed > ang_cap * (1 + 1e-9):
            raise AssertionError(f"twist exceeds caps: |v|={twist.linear_speed}, |w|={twist.angular_speed}")
        self.prev_pose, self.prev_image = self.pose, self.image
        self.last_motion = twist.scaled(self.cfg.dt)
        self.pose = integrate_twist(self.pose, twist, self.cfg.dt)
        self.image, self.depth = render(sc.scene, self.pose, sc.intrinsics)
        self.positions.append(self.pose.translation)
        hit = check_collision(sc.scene, self.cfg.body, self.pose)
        err = photometric_error(error_to, self.image) if error_to is not None else float("nan")
        rec = StepRecord(self.steps, self.pose, twist, err, subgoal, hit)
        self.records.append(rec)
        self.collided = self.collided or hit
        return rec

    def door_success(self) -> bool:
        door = self.scenario.door
        if door is None or self.collided:
            return False
        pts = self.positions
        if door.signed_distance(pts[-1]) <= 0:
            return False
        for a, b in zip(pts[:-1], pts[1:]):
            da, db = door.signed_distance(a), door.signed_distance(b)
            if (da <= 0) != (db <= 0):
                u = da / (da - db)
                if not door.contains(a + u * (b - a)):
                    return False
        return True

    def finish(self, subgoals: int = 0) -> TrialResult:
        t_err, r_err = pose_error(self.pose, self.scenario.goal)
        if self.collided:
            outcome = "collision"
        elif self.degenerate:
            outcome = "degenerate-flow"
        elif self.scenario.task == "door":
            outcome = "success" if self.door_success() else "timeout"
        else:
            outcome = "success" if (t_err < SUCCESS_TRANS and r_err < SUCCESS_ROT) else "timeout"
        return TrialResult(outcome, t_err, r_err, self.steps, tuple(self.records), subgoals)


class IBVSController:
    """One control step: flow to the sub-goal, depth, damped least-squares twist."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def target_flow(self, sim: Simulation, subgoal: ImageBuffer, subgoal_pose: Pose | None):
        if self.cfg.flow_source == "ground-truth":
            if subgoal_pose is None:
                raise ValueError("ground-truth flow needs the sub-goal's source pose")
            return ground_truth_flow(sim.scenario.scene, sim.pose, subgoal_pose, sim.scenario.intrinsics)
        return estimate_flow(sim.image, subgoal, self.cfg.flow)

    def depth(self, sim: Simulation) -> DepthMap:
        """Ground-truth depth, or depth from the flow between the last two frames.

        Before the first motion the nominal constant depth is used; when the
        last motion gives too little parallax the previous estimate is kept.
        """
        if self.cfg.depth_source == "ground-truth":
            return sim.depth
        intr = sim.scenario.intrinsics
        if sim.last_motion is not None:
            if self.cfg.flow_source == "ground-truth":
                flow = ground_truth_flow(sim.scenario.scene, sim.prev_pose, sim.pose, intr)
            else:
                flow = estimate_flow(sim.prev_image, sim.image, self.cfg.flow)
            est = motion_depth(flow, sim.last_motion, intr, self.cfg.solver)
            if est is not None:
                sim.depth_estimate = est
        return sim.depth_estimate if sim.depth_estimate is not None else nominal_depth(intr, self.cfg.solver)

    def __call__(self, sim: Simulation, subgoal: ImageBuffer, subgoal_pose: Pose | None) -> Twist:
        flow = self.target_flow(sim, subgoal, subgoal_pose)
        return solve_velocity(flow, self.depth(sim), sim.scenario.intrinsics, self.cfg.solver)


def inner_servo(
    subgoal: ImageBuffer,
    sim: Simulation,
    cfg: RunConfig,
    controller=None,
    subgoal_pose: Pose | None = None,
    subgoal_index: int = 0,
    max_steps: int | None = None,
) -> tuple[bool, list[StepRecord]]:
    """Servo until the photometric error to ``subgoal`` drops below ``eps_phi``.

    Returns whether it converged and the records appended during this call.
    Degenerate flow or a collision stops the loop and is flagged on ``sim``.
    """
    controller = controller or IBVSController(cfg)
    budget = cfg.max_inner_steps if max_steps is None else max_steps
    records: list[StepRecord] = []
    err = photometric_error(subgoal, sim.image)
    while err >= cfg.eps_phi and len(records) < budget and sim.budget_left > 0 and not sim.collided:
        try:
            twist = controller(sim, subgoal, subgoal_pose)
        except DegenerateFlowError as exc:
            log.debug("degenerate flow at step %d: %s", sim.steps, exc)
            sim.degenerate = True
            break
        rec = sim.execute(twist, subgoal, subgoal_index)
        records.append(rec)
        err = rec.photometric_error
    return err < cfg.eps_phi, records


def run_trial(scenario: Scenario, cfg: RunConfig | None = None, foresight: Foresight | None = None, controller=None) -> TrialResult:
    cfg = cfg or RunConfig()
    foresight = foresight or KeyframeOracle(scenario, cfg.oracle)
    sim = Simulation(scenario, cfg)
    if sim.collided:
        return sim.finish()

    def sample():
        req = ForesightRequest(sim.image, scenario.prompt, pose=sim.pose)
        if isinstance(foresight, KeyframeOracle):
            img, pose, _ = foresight.propose(req)
            return img, pose
        return foresight.next_subgoal(req), None

    goal, goal_pose = sample()
    dist = np.inf
    n_goals = 0
    while dist >= cfg.eps_p and sim.budget_left > 0:
        last = goal
        inner_servo(goal, sim, cfg, controller, goal_pose, n_goals)
        n_goals += 1
        if sim.collided or sim.degenerate:
            break
        goal, goal_pose = sample()
        dist = photometric_error(last, goal)
    return sim.finish(n_goals)


def default_noise(sigma_t: float = 0.02, sigma_r_deg: float = 2.0) -> GoalNoise:
    return GoalNoise(sigma_t=sigma_t, sigma_r=float(np.radians(sigma_r_deg)))


def twist_magnitudes(records: Iterable[StepRecord]) -> tuple[np.ndarray, np.ndarray]:
    recs = list(records)
    return (
        np.array([r.twist.linear_speed for r in recs]),
        np.array([r.twist.angular_speed for r in recs]),
    )
