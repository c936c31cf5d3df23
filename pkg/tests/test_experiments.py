import csv
import json
import math

import numpy as np
import pytest

from subgoal_servo import cli
from subgoal_servo import experiments as ex
from subgoal_servo.executor import RunConfig, TrialResult, read_jsonl, run_trial
from subgoal_servo.foresight import OracleConfig
from subgoal_servo.geometry import Pose, look_rotation
from subgoal_servo.scenarios import make_door_scenario

GT = {"flow_source": "ground-truth", "depth_source": "ground-truth"}


def test_spec_validation():
    with pytest.raises(ValueError):
        ex.ExperimentSpec(trials=0)
    with pytest.raises(ValueError):
        ex.ExperimentSpec(method="pose-diffusion")
    with pytest.raises(ValueError):
        ex.ExperimentSpec(task="maze")
    assert ex.ExperimentSpec(seed=5, trials=3).seeds == [5, 6, 7]


def test_cam_axis_collides_from_offset_start():
    sc = make_door_scenario(0)
    r = ex.cam_axis_baseline(sc, RunConfig())
    assert r.outcome == "collision"


def test_cam_axis_succeeds_when_aimed_through_door():
    sc = make_door_scenario(0)
    start = np.array([sc.door.center[0], sc.door.center[1], 0.0])
    aimed = Pose(look_rotation(np.asarray(sc.door.center) - start), start)
    r = ex.cam_axis_baseline(sc.with_start(aimed), RunConfig())
    assert r.success
    assert sc.door.signed_distance(r.records[-1].pose.translation) >= 0.15


def test_rtvs_final_succeeds_from_close_range():
    sc = make_door_scenario(1)
    r = ex.rtvs_final_baseline(sc.with_start(sc.keyframes[6]), RunConfig())
    assert r.success


def test_rtvs_final_fails_from_far():
    r = ex.rtvs_final_baseline(make_door_scenario(1), RunConfig())
    assert not r.success


def test_aggregate_policy():
    rs = [
        TrialResult("success", 0.01, 0.01, 100, ()),
        TrialResult("timeout", 0.30, 0.10, 200, ()),
        TrialResult("collision", 9.0, 9.0, 50, ()),
        TrialResult("degenerate-flow", 0.50, 0.20, 0, ()),
    ]
    agg = ex.aggregate("door", "imagine2servo", rs)
    assert agg.success_rate == 0.25 and agg.collision_rate == 0.25
    assert agg.mean_trans_err == pytest.approx(0.27)
    assert agg.mean_rot_err == pytest.approx(0.31 / 3)
    assert agg.mean_steps == pytest.approx(100)
    only_crashes = ex.aggregate("door", "cam-axis", [rs[2]])
    assert math.isnan(only_crashes.mean_trans_err)
    with pytest.raises(ValueError):
        ex.aggregate("door", "cam-axis", [])


def test_run_experiment_outputs_are_stable(tmp_path):
    spec = ex.ExperimentSpec(method="cam-axis", trials=3, seed=8, out_dir=str(tmp_path / "a"))
    agg, results = ex.run_experiment(spec)
    again = ex.ExperimentSpec(method="cam-axis", trials=3, seed=8, out_dir=str(tmp_path / "b"))
    ex.run_experiment(again)
    for name in ("cam-axis_trials.csv", "cam-axis_aggregate.csv", "cam-axis_seed9.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader(open(tmp_path / "a" / "cam-axis_trials.csv")))
    assert tuple(rows[0]) == ex.TRIAL_HEADER == ("seed", "method", "outcome", "trans_err_m", "rot_err", "steps", "collisions")
    assert [r[0] for r in rows[1:]] == ["8", "9", "10"]
    assert agg.success_rate == sum(r.success for r in results) / 3
    log = read_jsonl(tmp_path / "a" / "cam-axis_seed8.jsonl")
    assert log.summary_json() == results[0].summary_json()


def test_worker_pool_matches_sequential():
    seq = ex.run_trials("door", "cam-axis", [0, 1, 2, 3], RunConfig(), workers=1)
    par = ex.run_trials("door", "cam-axis", [0, 1, 2, 3], RunConfig(), workers=2)
    assert [r.summary_json() for r in seq] == [r.summary_json() for r in par]


def test_ablate_n_single_row_and_validation(tmp_path):
    spec = ex.ExperimentSpec(trials=1, seed=0, overrides=dict(GT), out_dir=str(tmp_path))
    table = ex.ablate_n(spec, [9])
    assert table == [(9, 1.0)]
    assert (tmp_path / "ablate_n.csv").read_text() == "n,success_rate\n9,1.0000\n"
    with pytest.raises(ValueError):
        ex.ablate_n(spec, [1])


def test_two_keyframe_arm_only_targets_final():
    sc = make_door_scenario(0)
    cfg = RunConfig.from_dict({**GT, "oracle": {"n": 2}, "max_total_steps": 60})
    r = run_trial(sc, cfg)
    assert {x.subgoal for x in r.records} <= {0}


def test_curves_have_one_row_per_step_and_boundaries(tmp_path):
    cfg = RunConfig.from_dict({**GT, "oracle": {"n": 4}})
    r = run_trial(make_door_scenario(2), cfg)
    assert r.success and r.subgoals == 3
    log = tmp_path / "trial.jsonl"
    r.write_jsonl(log)
    paths = ex.emit_curves(log, tmp_path / "curves")
    assert len(paths) == 3
    series = {}
    for p in paths:
        rows = list(csv.reader(open(p)))
        assert rows[0][:3] == ["step", "subgoal", "boundary"]
        assert len(rows) - 1 == r.steps
        series[p.stem.split("_", 1)[1]] = rows[1:]
    photo = series["photometric"]
    assert float(photo[-1][3]) < cfg.eps_phi
    err = np.array([float(x[3]) for x in photo])
    seg = np.array([int(x[1]) for x in photo])
    bounds = [int(x[0]) for x in photo if x[2] == "1"]
    assert len(bounds) == 2
    for b in bounds:
        assert err[b] > err[b - 1]  # upward jump at each switch
    for g in range(3):
        e = err[seg == g]
        assert e[-1] < e[0]


def test_curves_reject_malformed_log(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"type": "step"}\n')
    with pytest.raises(ValueError):
        ex.emit_curves(bad, tmp_path)


def test_cli_precedence_and_subcommands(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trials": 2, "overrides": {"max_total_steps": 20}}))
    out = tmp_path / "run"
    rc = cli.main(["run", "--method", "cam-axis", "--trials", "5", "--max-total-steps", "500", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(open(out / "cam-axis_trials.csv")))
    assert len(rows) == 3  # config wins: 2 trials
    assert all(int(r[5]) <= 20 for r in rows[1:])
    printed = capsys.readouterr().out
    assert printed.startswith(",".join(ex.AGGREGATE_HEADER))

    args = cli.build_parser().parse_args(["run", "--trials", "4", "--ground-truth", "--n", "4"])
    spec = cli.resolve_spec(args)
    assert spec.trials == 4 and spec.method == "imagine2servo"
    assert spec.run_config().flow_source == "ground-truth" and spec.run_config().oracle == OracleConfig(n=4)
    noisy = cli.resolve_spec(cli.build_parser().parse_args(["run", "--goal-noise", "0.02", "2", "0"]))
    assert noisy.run_config().oracle.goal_noise.sigma_r == pytest.approx(math.radians(2))

    assert cli.main(["aggregate", str(out / "cam-axis_trials.csv"), "--out", str(tmp_path / "agg.csv")]) == 0
    assert (tmp_path / "agg.csv").read_text() == (out / "cam-axis_aggregate.csv").read_text()

    assert cli.main(["gen-scenarios", "--trials", "2", "--seed", "3", "--out", str(tmp_path / "sc")]) == 0
    assert sorted(p.name for p in (tmp_path / "sc").iterdir()) == ["door_seed3.json", "door_seed4.json"]

    assert cli.main(["curves", str(out / "cam-axis_seed0.jsonl"), "--out", str(tmp_path / "cv")]) == 0
    assert len(list((tmp_path / "cv").iterdir())) == 3

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(bad)])
