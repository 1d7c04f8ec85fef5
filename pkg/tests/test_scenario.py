import numpy as np
import pytest
from hypothesis import given, strategies as st

from tipservo.geometry import CameraModel, GeometryError, Pose3, ToolOffset, project_weak, tip_world
from tipservo.scenario import (CorruptionSpec, Rig, TrajectorySpec, WarmupLog, generate_trajectory, observe,
                               render_mask, s_pattern_targets, sharpness_profile, spec_from_dict,
                               tip_camera_path)


def flat_rig(scale=2.0):
    return Rig(np.eye(3), np.zeros(3), ToolOffset(np.zeros(3)), CameraModel(scale, [240, 180], (480, 360)))


def test_zero_duration_is_empty():
    assert generate_trajectory(TrajectorySpec(duration=0.0), Rig.default()) == []


def test_trajectory_is_deterministic():
    rig = Rig.default()
    a = generate_trajectory(TrajectorySpec(), rig, seed=3, wobble_deg=2.0)
    b = generate_trajectory(TrajectorySpec(), rig, seed=3, wobble_deg=2.0)
    assert all(np.array_equal(p.to_array12(), q.to_array12()) for p, q in zip(a, b))


def test_home_pose_puts_tip_at_centre_in_focus():
    rig = Rig.default()
    assert np.allclose(rig.tip_pixel(rig.home_pose()), rig.camera.principal_point)
    assert np.isclose(rig.tip_camera(rig.home_pose())[2], rig.z_star)


def test_dataset_scale():
    assert np.isclose(Rig.default().camera.scale, 1000 / 9.164)


def test_rig_dict_round_trip():
    rig = Rig.default()
    back = Rig.from_dict(rig.to_dict())
    assert np.allclose(back.R, rig.R) and np.allclose(back.t_vec, rig.t_vec)
    assert Rig.from_dict({"preset": "wide_field"}).camera.image_size == (1920, 1440)


def test_unknown_spec_field_rejected():
    with pytest.raises(ValueError):
        spec_from_dict(TrajectorySpec, {"durration": 1.0})
    with pytest.raises(ValueError):
        CorruptionSpec(dropout_rate=2.0).validate()


def test_clean_channel_is_exact():
    rig = Rig.default()
    log = observe(rig, generate_trajectory(TrajectorySpec(duration=3.0), rig, seed=1), CorruptionSpec(), seed=1)
    assert np.array_equal(log.px, log.px_true)
    assert log.valid.all()


def test_scale_perturbation_law():
    rig = flat_rig(2.0)
    log = observe(rig, [Pose3(np.eye(3), [10.0, 0.0, 0.0])], CorruptionSpec(scale_perturbation=0.1))
    assert np.allclose(log.px[0] - log.px_true[0], [2.0, 0.0])


def test_jitter_error_matches_replay():
    rig = flat_rig(1.0)
    n, v, k = 3000, 0.5, 3
    poses = [Pose3(np.eye(3), [v * i / 1.0 - 700.0, 0.0, 0.0]) for i in range(n)]
    log = observe(rig, poses, CorruptionSpec(jitter_frames_max=k), seed=4)
    err = np.linalg.norm(log.px - log.px_true, axis=1)
    # brute-force replay of the delay draw
    shift = np.random.default_rng(4).integers(-k, k + 1, size=n)
    src = np.clip(np.arange(n) + shift, 0, n - 1)
    assert np.allclose(err, v * np.abs(src - np.arange(n)))
    assert abs(err.mean() - v * 12 / 7) < 0.05


def test_dropout_marks_nan():
    rig = Rig.default()
    log = observe(rig, generate_trajectory(TrajectorySpec(duration=5.0), rig), CorruptionSpec(dropout_rate=0.2,
                                                                                                 dropout_burst_max=4))
    assert (~log.valid).any()
    assert np.isnan(log.px[~log.valid]).all() and np.isfinite(log.px[log.valid]).all()


def test_log_jsonl_round_trip(tmp_path):
    rig = Rig.default()
    log = observe(rig, generate_trajectory(TrajectorySpec(duration=2.0), rig),
                  CorruptionSpec(pixel_noise_sigma=1.0, dropout_rate=0.1), seed=2)
    path = tmp_path / "w.jsonl"
    log.write_jsonl(str(path))
    back = WarmupLog.read_jsonl(str(path), rig)
    assert len(back) == len(log)
    assert np.array_equal(back.valid, log.valid)
    assert np.allclose(back.px[log.valid], log.px[log.valid])


def test_sharpness_peak_and_symmetry():
    rig = Rig.default()
    z = np.linspace(-4, 4, 801)
    s = sharpness_profile(rig, z)
    assert np.isclose(z[np.argmax(s)], rig.z_star)
    assert np.isclose(sharpness_profile(rig, rig.z_star), rig.sharp_peak)


@given(st.floats(0, 10))
def test_sharpness_symmetric(d):
    rig = Rig.default(z_star=0.4)
    assert np.isclose(sharpness_profile(rig, 0.4 + d), sharpness_profile(rig, 0.4 - d))


def test_sharpness_plateau_beyond_onset():
    rig = Rig.default()
    assert sharpness_profile(rig, rig.plateau_onset + 0.5) == rig.sharp_floor


def test_axial_scan_argmax_within_one_step():
    rig = Rig.default(z_star=0.37)
    spec = TrajectorySpec(kind="axial_scan", duration=3.0, amplitude=2.0)
    path = tip_camera_path(spec, rig)
    s = sharpness_profile(rig, path[:, 2])
    step = np.diff(path[:, 2]).max()
    assert abs(path[np.argmax(s), 2] - rig.z_star) <= step


def test_horizontal_mask_is_one_row():
    rig = Rig.default()
    mask = render_mask(rig, rig.home_pose(), 1, direction=(1.0, 0.0))
    ys, xs = np.nonzero(mask)
    assert len(set(ys)) == 1
    assert xs.min() == 240 and xs.max() == 479


def test_mask_tip_matches_projection():
    rig = Rig.default()
    pose = rig.pose_for_tip_camera([0.3, -0.2, 0.0])
    mask = render_mask(rig, pose, 1)
    tip = np.rint(project_weak(rig.camera, rig.R, rig.t_vec, tip_world(pose, rig.tool))).astype(int)
    assert mask[tip[1], tip[0]]


@pytest.mark.parametrize("width", [3, 5])
def test_mask_pixel_count(width):
    rig = Rig.default()
    mask = render_mask(rig, rig.home_pose(), width, direction=(1.0, 0.0))
    length = 240
    assert abs(mask.sum() - length * width) <= 2 * length


def test_mask_rejects_tip_outside_view():
    rig = Rig.default()
    with pytest.raises(GeometryError):
        render_mask(rig, rig.pose_for_tip_camera([100.0, 0.0, 0.0]))


def test_s_pattern_order():
    t = s_pattern_targets(Rig.default().camera)
    assert t.shape == (9, 2)
    assert t[0, 0] < t[1, 0] < t[2, 0] and t[3, 0] > t[4, 0] > t[5, 0]
