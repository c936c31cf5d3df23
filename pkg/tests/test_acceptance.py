"""End-to-end acceptance checks A1-A9.

Each test records a verdict that the terminal summary prints as one
PASS/FAIL line. Criteria known not to hold are strict xfails, so they stay
red in the summary without breaking the run; the reasons are in the README.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import record
from subgoal_servo import experiments as ex
from subgoal_servo.executor import RunConfig, default_noise
from subgoal_servo.foresight import ForesightRequest, KeyframeOracle, OracleConfig, RemoteForesight, serve_oracle
from subgoal_servo.geometry import Pose, Twist, integrate_twist
from subgoal_servo.ibvs import SolverConfig, build_system, clamp_twist, interaction_row, predicted_flow, solve_velocity
from subgoal_servo.images import DepthMap, Intrinsics
from subgoal_servo.scenarios import make_door_scenario
from subgoal_servo.scene import render

SEEDS = list(range(20))
GT = RunConfig().ground_truth()
EST = RunConfig()
WORKERS = ex.default_workers()


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def rate(results) -> float:
    return sum(r.success for r in results) / len(results)


# --- A1 ----------------------------------------------------------------------


def test_A1_interaction_matrix_matches_projection_jacobian():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    d = 1e-5
    worst = 0.0
    for _ in range(100):
        x, y, Z = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 10)
        X = np.array([x * Z, y * Z, Z])
        J = np.zeros((2, 6))
        for i in range(6):
            xi = np.zeros(6)
            xi[i] = 1.0
            fwd = integrate_twist(Pose.identity(), Twist.from_vector(xi), d).inverse_transform_points(X)
            bwd = integrate_twist(Pose.identity(), Twist.from_vector(-xi), d).inverse_transform_points(X)
            J[:, i] = (fwd[:2] / fwd[2] - bwd[:2] / bwd[2]) / (2 * d)
        L = interaction_row(x, y, Z)
        worst = max(worst, np.linalg.norm(J - L) / np.linalg.norm(L))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 1.0
    record("A1", ok, f"max relative error {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 1 s)")
    assert ok


# --- A2 ----------------------------------------------------------------------


def test_A2_solver_recovers_twist_and_matches_brute_force():
    intr = Intrinsics.default()
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_rt, worst_bf = 0.0, 0.0
    for _ in range(10):
        depth = DepthMap(rng.uniform(0.3, 8.0, intr.shape), np.ones(intr.shape, bool))
        cfg = SolverConfig()
        tw = clamp_twist(rng.normal(0, 0.4, 6), cfg)
        flow = predicted_flow(Twist.from_vector(tw), depth, intr)
        got = solve_velocity(flow, depth, intr, SolverConfig(damping=0.0)).as_vector()
        worst_rt = max(worst_rt, np.linalg.norm(got - tw) / np.linalg.norm(tw))

        A, f = build_system(flow, depth, intr, cfg.stride)
        f = f + rng.normal(0, 0.5, f.shape)

        def objective(t):
            r = A @ t - f
            return r @ r + cfg.damping * t @ t

        ref = minimize(objective, np.zeros(6), method="BFGS", options={"gtol": 1e-12, "maxiter": 10000}).x
        N = A.T @ A + cfg.damping * np.eye(6)
        closed = np.linalg.solve(N, A.T @ f)
        worst_bf = max(worst_bf, float(np.max(np.abs(closed - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst_rt < 1e-6 and worst_bf < 1e-4 and elapsed < 10
    record("A2", ok, f"round-trip rel err {worst_rt:.1e} (< 1e-6), damped vs brute force {worst_bf:.1e} (< 1e-4), {elapsed:.1f} s")
    assert ok


# --- A3 / A7 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def gt_door():
    return timed(ex.run_trials, "door", "imagine2servo", SEEDS, GT, WORKERS)


def nonmonotone_steps(result) -> int:
    worst = 0
    for g in sorted({r.subgoal for r in result.records}):
        e = np.array([r.photometric_error for r in result.records if r.subgoal == g])[5:]
        worst = max(worst, int(np.sum(np.diff(e) > 0)))
    return worst


def test_A3_ground_truth_perception_converges(gt_door):
    results, elapsed = gt_door
    sr = rate(results)
    worst = max(nonmonotone_steps(r) for r in results)
    ok = sr == 1.0 and worst <= 2 and elapsed < 300
    record("A3", ok, f"success {sr:.2f} (= 1.0), max non-monotone steps per sub-goal {worst} (<= 2), {elapsed:.0f} s (< 300 s)")
    assert ok


def speed(rec) -> float:
    return float(np.linalg.norm(rec.twist.as_vector()))


@pytest.mark.xfail(strict=True, reason="the last 10% of a trial often spans the fast start of the final sub-goal")
def test_A7_velocity_profile(gt_door):
    results, _ = gt_door
    cfg = GT.solver
    converged = [r for r in results if r.success]
    caps_ok = all(
        rec.twist.linear_speed <= cfg.max_linear * (1 + 1e-9) and rec.twist.angular_speed <= cfg.max_angular * (1 + 1e-9)
        for r in converged
        for rec in r.records
    )
    decel = []
    for r in converged:
        k = max(1, len(r.records) // 10)
        first = np.mean([speed(x) for x in r.records[:k]])
        last = np.mean([speed(x) for x in r.records[-k:]])
        decel.append(last < first)
    # same comparison inside each servo-to-sub-goal segment, reported for context
    seg_total = seg_ok = 0
    for r in converged:
        for g in sorted({x.subgoal for x in r.records}):
            recs = [x for x in r.records if x.subgoal == g]
            k = max(1, len(recs) // 10)
            seg_total += 1
            seg_ok += np.mean([speed(x) for x in recs[-k:]]) < np.mean([speed(x) for x in recs[:k]])
    ok = caps_ok and all(decel)
    record(
        "A7",
        ok,
        f"caps respected {caps_ok}; trials decelerating {sum(decel)}/{len(decel)}; sub-goal segments decelerating {seg_ok}/{seg_total}",
    )
    assert ok


# --- A4 / A5 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def est_door():
    arms, times = {}, {}
    for method in ex.METHODS:
        arms[method], times[method] = timed(ex.run_trials, "door", method, SEEDS, EST, WORKERS)
    return arms, times


def test_A4_subgoals_beat_final_image_servoing(est_door):
    arms, times = est_door
    i2s, rtvs = rate(arms["imagine2servo"]), rate(arms["rtvs-final"])
    elapsed = sum(times.values())
    ok = i2s >= 0.9 and rtvs <= i2s - 0.25 and elapsed < 900
    record("A4-a", ok, f"imagine2servo {i2s:.2f} (>= 0.9), rtvs-final {rtvs:.2f} (<= imagine2servo - 0.25), {elapsed:.0f} s (< 900 s)")
    assert ok


@pytest.mark.xfail(strict=True, reason="final-image servoing cannot start on these scenes; cam-axis clears some doors")
def test_A4_cam_axis_lowest(est_door):
    arms, _ = est_door
    r = {m: rate(arms[m]) for m in ex.METHODS}
    ok = r["cam-axis"] < min(r["imagine2servo"], r["rtvs-final"])
    outcomes = {m: {o: sum(x.outcome == o for x in arms[m]) for o in ("success", "collision", "timeout", "degenerate-flow")} for m in ex.METHODS}
    record("A4-b", ok, f"cam-axis {r['cam-axis']:.2f} vs rtvs-final {r['rtvs-final']:.2f} vs imagine2servo {r['imagine2servo']:.2f}; outcomes {outcomes}")
    assert ok


def test_A5_sampling_frequency_ablation(est_door):
    # n = 9 is the imagine2servo arm of A4: same seeds, same configuration
    arms, times = est_door
    spec = ex.ExperimentSpec(task="door", trials=len(SEEDS), seed=SEEDS[0], workers=WORKERS)
    table, elapsed = timed(ex.ablate_n, spec, [2, 4])
    rates = dict(table)
    rates[9] = rate(arms["imagine2servo"])
    elapsed += times["imagine2servo"]
    ok = rates[9] >= rates[4] >= rates[2] and rates[9] - rates[2] >= 0.3 and elapsed < 1800
    record("A5", ok, f"success n=2 {rates[2]:.2f}, n=4 {rates[4]:.2f}, n=9 {rates[9]:.2f}; gap {rates[9] - rates[2]:.2f} (>= 0.3), {elapsed:.0f} s")
    assert ok


# --- A6 ----------------------------------------------------------------------


def test_A6_reach_thresholds():
    results, elapsed = timed(ex.run_trials, "reach", "imagine2servo", SEEDS, GT, WORKERS)
    bad = [s for s, r in zip(SEEDS, results) if r.success and not (r.trans_err < 0.03 and r.rot_err < 0.03)]
    agg = ex.aggregate("reach", "imagine2servo", results)
    row = ex.csv_text(ex.AGGREGATE_HEADER, [agg.row()]).splitlines()[1]
    ok = not bad and elapsed < 300
    record("A6", ok, f"successes violating thresholds {bad}; success {agg.success_rate:.2f}; row '{row}'; {elapsed:.0f} s (< 300 s)")
    assert ok


# --- A8 ----------------------------------------------------------------------


def test_A8_robust_to_subgoal_errors():
    cfg = RunConfig.from_dict({**GT.to_dict(), "oracle": OracleConfig(goal_noise=default_noise(0.02, 2.0)).to_dict()})
    results, elapsed = timed(ex.run_trials, "door", "imagine2servo", SEEDS, cfg, WORKERS)
    sr = rate(results)
    ok = sr >= 0.8
    record("A8", ok, f"success with 2 cm / 2 deg sub-goal noise {sr:.2f} (>= 0.8), {elapsed:.0f} s")
    assert ok


# --- A9 ----------------------------------------------------------------------


def test_A9_wire_protocol_is_bit_exact():
    sc = make_door_scenario(6)
    oracle = KeyframeOracle(sc)
    t0 = time.perf_counter()
    same = 0
    poses = [oracle.keyframes[k] for k in (0, 2, 4, 6, 8)]
    with serve_oracle(sc) as server:
        client = RemoteForesight(server.url, sc.intrinsics)
        for p in poses:
            img = render(sc.scene, p, sc.intrinsics)[0]
            req = ForesightRequest(img, sc.prompt, aux=img)
            same += np.array_equal(client.next_subgoal(req).pixels, oracle.next_subgoal(req).pixels)
    elapsed = time.perf_counter() - t0
    ok = same == 5 and elapsed < 10
    record("A9", ok, f"{same}/5 sub-goals bit-identical through HTTP/JSON/PNG, {elapsed:.2f} s (< 10 s)")
    assert ok
