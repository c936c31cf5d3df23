import math
from dataclasses import replace

import numpy as np
import pytest

from subgoal_servo.executor import (
    RunConfig,
    Simulation,
    StepRecord,
    TrialResult,
    inner_servo,
    read_jsonl,
    run_trial,
)
from subgoal_servo.foresight import KeyframeOracle, RemoteForesight, serve_oracle
from subgoal_servo.geometry import Pose, Twist, pose_error, quat_from_axis_angle
from subgoal_servo.scenarios import Scenario, make_door_scenario, make_reach_scenario
from subgoal_servo.scene import Scene, Texture, TexturedQuad, render

GT = RunConfig().ground_truth()


def wall_scenario(start: Pose, goal: Pose) -> Scenario:
    tex = Texture(checker_period=0.3, base=0.5, contrast=0.3, noise_seed=3, noise_scale=0.1, noise_amplitude=0.3)
    wall = TexturedQuad((-4, -4, 2.0), (8, 0, 0), (0, 8, 0), tex)
    return Scenario("reach", 0, Scene((wall,)), start, (start, goal), "reach")


def test_inner_servo_already_there():
    sc = wall_scenario(Pose.identity(), Pose.identity())
    sim = Simulation(sc, GT)
    converged, recs = inner_servo(sim.image, sim, GT, subgoal_pose=sc.goal)
    assert converged and recs == []


def test_inner_servo_lateral_offset_converges():
    goal = Pose.identity()
    sc = wall_scenario(Pose.from_translation(0.1, 0, 0), goal)
    sim = Simulation(sc, GT)
    target = render(sc.scene, goal, sc.intrinsics)[0]
    converged, recs = inner_servo(target, sim, GT, subgoal_pose=goal)
    assert converged and len(recs) > 0
    assert pose_error(sim.pose, goal)[0] < 0.005


def test_inner_servo_budget_of_one():
    sc = make_door_scenario(0)
    sim = Simulation(sc, GT)
    far = sc.keyframes[4]
    target = render(sc.scene, far, sc.intrinsics)[0]
    converged, recs = inner_servo(target, sim, GT, subgoal_pose=far, max_steps=1)
    assert not converged and len(recs) == 1 and sim.steps == 1


def test_start_at_goal_succeeds_without_moving():
    sc = make_door_scenario(1)
    at_goal = sc.with_start(sc.goal)
    r = run_trial(at_goal, GT)
    assert r.success and r.steps == 0 and r.subgoals == 1


def test_blank_view_is_degenerate():
    sc = make_door_scenario(0)
    away = Pose(quat_from_axis_angle((0, 1, 0), math.pi), (0, 0, 0))
    r = run_trial(sc.with_start(away), RunConfig())
    assert r.outcome == "degenerate-flow" and r.steps == 0


def test_collision_halts_trial():
    sc = make_door_scenario(0)
    sim = Simulation(sc, GT)
    while not sim.collided and sim.steps < 500:
        sim.execute(Twist((0, 0, 0.5), (0, 0, 0)), None, 0)
    r = sim.finish()
    assert r.outcome == "collision"
    assert r.records[-1].collision and not any(x.collision for x in r.records[:-1])


def test_executor_rejects_twists_over_caps():
    sim = Simulation(make_door_scenario(0), GT)
    with pytest.raises(AssertionError):
        sim.execute(Twist((0, 0, 0.6), (0, 0, 0)), None, 0)


def test_ground_truth_flow_needs_subgoal_pose():
    sc = make_door_scenario(0)
    sim = Simulation(sc, GT)
    with pytest.raises(ValueError):
        inner_servo(render(sc.scene, sc.keyframes[1], sc.intrinsics)[0], sim, GT)


def test_door_trial_with_ground_truth_perception():
    r = run_trial(make_door_scenario(5), GT)
    assert r.success and r.subgoals == 8
    caps = GT.solver
    assert all(x.twist.linear_speed <= caps.max_linear + 1e-12 for x in r.records)
    assert all(x.twist.angular_speed <= caps.max_angular + 1e-12 for x in r.records)
    assert [x.step for x in r.records] == list(range(r.steps))
    # sub-goal indices only move forward
    idx = [x.subgoal for x in r.records]
    assert all(b >= a for a, b in zip(idx, idx[1:]))


def test_reach_success_respects_thresholds():
    r = run_trial(make_reach_scenario(1), GT)
    assert r.success
    assert r.trans_err < 0.03 and r.rot_err < 0.03


def test_trials_are_deterministic():
    cfg = replace(RunConfig(), max_total_steps=40)
    a = run_trial(make_door_scenario(2), cfg)
    b = run_trial(make_door_scenario(2), cfg)
    assert a.summary_json() == b.summary_json()
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]


def test_remote_foresight_in_the_loop():
    sc = make_door_scenario(3)
    cfg = replace(RunConfig(), max_total_steps=30)
    with serve_oracle(sc, cfg.oracle) as server:
        r = run_trial(sc, cfg, RemoteForesight(server.url, sc.intrinsics))
    assert r.steps == 30 and r.outcome == "timeout"
    local = run_trial(sc, cfg, KeyframeOracle(sc, cfg.oracle))
    assert [x.to_json() for x in r.records] == [x.to_json() for x in local.records]


def test_jsonl_round_trip(tmp_path):
    cfg = replace(GT, max_total_steps=10)
    r = run_trial(make_door_scenario(0), cfg)
    path = tmp_path / "t.jsonl"
    r.write_jsonl(path)
    back = read_jsonl(path)
    assert back.summary_json() == r.summary_json()
    assert [x.to_json() for x in back.records] == [x.to_json() for x in r.records]
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(ValueError):
        read_jsonl(path)
    path.write_text(path.read_text().splitlines()[0] + "\n")
    with pytest.raises(ValueError):
        read_jsonl(path)


def test_run_config_dict_round_trip_and_validation():
    cfg = RunConfig(eps_phi=3.0, flow_source="ground-truth")
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict({"solver": {"damping": 0.1}}).solver.damping == 0.1
    for bad in ({"eps_p": 0}, {"max_inner_steps": 0}, {"flow_source": "x"}, {"depth_source": "x"}, {"dt": 0}):
        with pytest.raises(ValueError):
            RunConfig(**bad)


def test_step_record_json():
    rec = StepRecord(3, Pose.from_translation(1, 2, 3), Twist((0.1, 0, 0), (0, 0, 0.2)), 4.5, 2, False)
    back = StepRecord.from_json(rec.to_json())
    assert back.to_json() == rec.to_json()
    assert TrialResult("success", 0, 0, 0, ()).success
