import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tipservo import harness as hz
from tipservo.geometry import ConfigurationError
from tipservo.scenario import CorruptionSpec


def test_operator_idle_in_view():
    f, click = hz.scripted_operator(np.zeros(3), np.zeros(3), np.zeros(3), True, lambda: "next")
    assert np.allclose(f, 0) and click == "next"


def test_operator_zero_force_at_centre():
    f, click = hz.scripted_operator(np.ones(3), np.zeros(3), np.ones(3), False, lambda: None)
    assert np.allclose(f, 0) and click is None


@given(arrays(np.float64, 3, elements=st.floats(-1e4, 1e4)), arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
def test_operator_force_capped(tip, vel):
    f, _ = hz.scripted_operator(tip, vel, np.zeros(3), False, lambda: None)
    assert np.linalg.norm(f) <= hz.OperatorParams().force_cap


def test_fov_entry_is_quick():
    t, fmax = hz.fov_entry_time(30.0)
    assert t < 15.0 and fmax <= 5.0


def test_corrupted_rotation_angle():
    from tipservo.geometry import rotation_angle
    R = np.eye(3)
    assert np.isclose(np.degrees(rotation_angle(R, hz.corrupted_rotation(R, 15.0, (1, 1, 1)))), 15.0)


def test_report_matches_hand_computation():
    logs = [{"method": "m", "summary": {"err": v, "ok": b}} for v, b in ((1.0, True), (2.0, False), (6.0, True))]
    rows, text, js = hz.report(logs)
    r = {x["metric"]: x for x in rows}
    assert np.isclose(r["err"]["mean"], 3.0)
    assert np.isclose(r["err"]["std"], np.sqrt(((1 - 3) ** 2 + (2 - 3) ** 2 + (6 - 3) ** 2) / 2))
    assert r["err"]["median"] == 2.0
    assert np.isclose(r["err"]["p95"], 2.0 + 0.9 * 4.0)
    assert np.isclose(r["ok"]["mean"], 2 / 3)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert {p["metric"] for p in parsed} == {"err", "ok"}
    assert json.loads(js) == json.loads(json.dumps(rows))


def test_report_single_perfect_run():
    rows, _, _ = hz.report([{"summary": {"error_px": 0.0}}])
    assert rows[0]["mean"] == 0 and rows[0]["std"] == 0 and rows[0]["p95"] == 0


def test_report_needs_runs():
    with pytest.raises(ValueError):
        hz.report([])


def test_split_coverage_on_iid_scores():
    rng = np.random.default_rng(3)
    q, c, n = hz.split_coverage(rng.chisquare(2, 10_050))
    assert 0.93 <= c <= 0.97 and n == 5000


def test_tracker_coverage_in_band():
    r = hz.run_coverage(hz.Experiment("coverage_check"), 0)["summary"]
    assert 0.93 <= r["coverage"] <= 0.97


def test_config_validation():
    with pytest.raises(ConfigurationError):
        hz.experiment_from_config({"bogus": 1}, name="reach9")
    with pytest.raises(ConfigurationError):
        hz.experiment_from_config({}, name="nope")
    with pytest.raises(ConfigurationError):
        hz.experiment_from_config({"calibration": "psychic"}, name="reach9")
    e = hz.experiment_from_config({"corruption": {"pixel_noise_sigma": 0.0}, "tol_px": 8}, name="reach9",
                                  seed=4, repeats=2)
    assert e.seed == 4 and e.repeats == 2 and e.tol_px == 8


def test_run_loop_is_deterministic():
    exp = hz.Experiment("center_edge_center", calibration="truth")
    a = hz.dumps_steps(hz.run_center_edge_center(exp, 1))
    b = hz.dumps_steps(hz.run_center_edge_center(exp, 1))
    assert a == b and len(a) > 0


def test_clean_reach_hits_all_targets():
    exp = hz.Experiment("reach9", corruption=CorruptionSpec())
    s = hz.run_reach9(exp, 0)["summary"]
    assert s["successes"] == 9 and s["success"]


def test_depth_held_during_lateral_motion():
    s = hz.run_center_edge_center(hz.Experiment("center_edge_center"), 0)["summary"]
    assert s["success"] and s["max_abs_ez_lateral_mm"] <= 0.03


def test_repeats_use_consecutive_seeds():
    exp = hz.Experiment("coverage_check", seed=7, repeats=2, options={"n_steps": 300, "block": 50})
    logs = hz.run(exp)
    assert [lg["seed"] for lg in logs] == [7, 8]
