import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import solve_discrete_are

from tipservo import harness as hz
from tipservo.controller import (DEPTH, DEPTH_Q_Z, LATERAL, AdmittanceParams, CartesianGantry, ControlError,
                                 HillClimbParams, LegacyParams, MacroQPParams, MicroGains, PhaseState,
                                 PlanarArm4, admittance_step, dare_gain, deadzone, fuse_commands,
                                 fusion_norm_bound, hillclimb_depth_step, kkt_residual, lateral_gain,
                                 legacy_closed_loop, legacy_rollout, legacy_shared_step, macro_qp, micro_step,
                                 qp_matrices, riccati_residual, sat_norm, search_depth_weights,
                                 servo_axis_model)
from tipservo.geometry import CameraModel, damped_pinv_bound
from tipservo.scenario import Rig, sharpness_profile

vec3 = arrays(np.float64, 3, elements=st.floats(-1e4, 1e4))


@given(vec3, st.floats(1e-6, 1e3))
def test_sat_norm_caps(u, vmax):
    out = sat_norm(u, vmax)
    assert np.linalg.norm(out) <= vmax
    if np.linalg.norm(u) <= vmax:
        assert np.array_equal(out, u)
    else:
        assert np.dot(out, u) > 0


def test_deadzone_examples():
    assert np.allclose(deadzone([0.5, -2.0, 0.0], [1, 1, 1]), [0, -1, 0])
    assert np.allclose(deadzone([0.3, -0.9, 1.0], 1.0), 0.0)
    with pytest.raises(ControlError):
        deadzone([1.0], [-1.0])


@given(st.floats(0.0, 10.0), st.floats(-1e-6, 1e-6))
def test_deadzone_continuous_at_threshold(delta, eps):
    out = deadzone([delta + eps, -(delta + eps)], delta)
    assert np.all(np.abs(out) <= 1e-6 + 1e-12)


def test_admittance_equilibrium_and_example():
    p = AdmittanceParams()
    v, dp = admittance_step(np.zeros(3), np.zeros(3), p)
    assert np.allclose(v, 0) and np.allclose(dp, 0)
    v, dp = admittance_step(np.zeros(3), [12.0, 0, 0], p)
    assert np.allclose(v, [0.3996, 0, 0])
    assert np.allclose(dp, [0.333, 0, 0])


def test_admittance_steady_state():
    p = AdmittanceParams(v_max=10.0)
    f = np.array([0.6, -0.24, 0.12])
    v = np.zeros(3)
    for _ in range(2000):
        v, _ = admittance_step(v, f, p)
    assert np.allclose(v, f / 12.0, rtol=1e-9)


def test_qp_unconstrained_gantry():
    p = MacroQPParams(lambda_dq=0.0, lower=-1e3 * np.ones(3), upper=1e3 * np.ones(3), v_max=1e6)
    dp = np.array([0.2, -0.1, 0.05])
    x, info = macro_qp(np.eye(3), np.eye(3), dp, np.zeros(3), p)
    assert np.allclose(x, dp / p.dt)
    x0, _ = macro_qp(np.eye(3), np.eye(3), np.zeros(3), np.zeros(3), p)
    assert np.allclose(x0, 0)


def test_qp_active_box_beats_random_feasible_points():
    p = MacroQPParams(lambda_dq=1e-6, v_max=1e6)
    rng = np.random.default_rng(0)
    J_p = np.array([[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.1, 1.0]])
    dp = np.array([2 * p.upper[0] * p.dt, 0.1, -0.05])
    x, info = macro_qp(J_p, J_p, dp, np.zeros(3), p)
    assert np.isclose(x[0], p.upper[0])
    A, b = qp_matrices(J_p, dp, p)
    f = lambda z: float(np.sum((A @ z - b) ** 2))
    samples = rng.uniform(p.lower, p.upper, size=(10_000, 3))
    assert all(f(x) <= f(z) + 1e-9 for z in samples)
    assert kkt_residual(A, b, x, p.lower, p.upper) < 1e-9


def test_qp_scales_to_speed_cap():
    p = MacroQPParams()
    x, info = macro_qp(np.eye(3), np.eye(3), [1.0, 0.0, 0.0], np.zeros(3), p)
    assert info["scaled"] and np.linalg.norm(x) <= p.v_max


def test_qp_rejects_inverted_box():
    with pytest.raises(ControlError):
        macro_qp(np.eye(3), np.eye(3), np.zeros(3), np.zeros(3), MacroQPParams(lower=np.ones(3), upper=-np.ones(3)))


def test_redundant_arm_jacobian_matches_finite_difference(rng):
    arm = PlanarArm4()
    q = rng.uniform(-1, 1, 4)
    J = arm.jacobian(q)
    h = 1e-6
    Jfd = np.column_stack([(arm.fk(q + h * e)[0] - arm.fk(q - h * e)[0]) / (2 * h) for e in np.eye(4)])
    assert np.allclose(J[:3], Jfd, atol=1e-6)
    assert np.allclose(CartesianGantry().jacobian(q)[:3], np.eye(3))


def test_dare_golden_ratio_and_zero_cost():
    P, K = dare_gain(1.0, 1.0, 1.0, 1.0)
    phi = (1 + math.sqrt(5)) / 2
    assert abs(P[0, 0] - phi) < 1e-9 and abs(K[0, 0] - (phi - 1)) < 1e-9
    P0, K0 = dare_gain(0.5, 1.0, 0.0, 1.0)
    assert np.allclose(P0, 0) and np.allclose(K0, 0)


def test_dare_matches_scipy_on_random_systems(rng):
    n = 0
    while n < 50:
        A, B = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))
        if np.linalg.matrix_rank(np.hstack([B, A @ B])) < 2:
            continue
        Q, R = np.eye(2), np.eye(1)
        P, K = dare_gain(A, B, Q, R)
        ref = solve_discrete_are(A, B, Q, R)
        assert np.allclose(P, ref, rtol=1e-8, atol=1e-8)
        assert riccati_residual(A, B, Q, R, P) <= 1e-10 * max(1.0, np.abs(P).max())
        assert max(abs(np.linalg.eigvals(A - B @ K))) < 1
        n += 1


def test_dare_rejects_bad_weights():
    with pytest.raises(ControlError):
        dare_gain(1.0, 1.0, 1.0, 0.0)
    with pytest.raises(ControlError):
        dare_gain(1.0, 1.0, -1.0, 1.0)


def test_depth_weights_reproduce_published_gain():
    A, B = servo_axis_model(0.0333, 0.2)
    _, K = dare_gain(A, B, np.diag(DEPTH_Q_Z), np.eye(1))
    assert np.allclose(K.ravel(), [9.72, 2.73], atol=1e-6)
    Q, _, K2, _ = search_depth_weights()
    assert np.allclose(np.diag(Q), DEPTH_Q_Z, rtol=1e-6)


def test_lateral_gain_matches_scipy():
    dt = 0.0333
    P = solve_discrete_are(np.eye(2), dt * np.eye(2), 1600 * np.eye(2), np.eye(2))
    K = np.linalg.solve(np.eye(2) + dt**2 * P, dt * P)
    assert np.allclose(lateral_gain(dt), K, rtol=1e-8)


def test_micro_guard_and_fixture():
    g = MicroGains()
    ux, uz, ph = micro_step([1.0, 1.0], [0, 0], [0.5, 0.1], PhaseState(), False, g)
    assert np.allclose(ux, 0) and uz == 0
    ux, uz, ph = micro_step([1.0, 0.0], [0, 0], [0.7, 0.0], PhaseState(), True, g)
    assert ph.phase == LATERAL and uz == 0.0 and ux[0] < 0


def test_micro_depth_saturation_and_settle():
    g = MicroGains()
    ph = PhaseState()
    ez = [20.0 / 9.72, 0.0]
    ux, uz, ph = micro_step([0.0, 0.0], [0, 0], ez, ph, True, g)
    assert ph.phase == DEPTH and np.allclose(ux, 0) and uz == -5.0
    for k in range(3):
        ux, uz, ph = micro_step([0.0, 0.0], [0, 0], [0.01, 0.0], ph, True, g)
    assert ph.phase == LATERAL and not ph.depth_pending


def test_micro_hysteresis_returns_to_lateral():
    g = MicroGains()
    ph = PhaseState(phase=DEPTH)
    _, _, ph = micro_step([g.eps_coarse * 1.1, 0.0], [0, 0], [1.0, 0.0], ph, True, g)
    assert ph.phase == DEPTH
    _, _, ph = micro_step([g.eps_coarse * 1.3, 0.0], [0, 0], [1.0, 0.0], ph, True, g, z_axial=0.4)
    assert ph.phase == LATERAL and ph.z_ref == 0.4


def test_fusion_examples():
    J = np.eye(3)
    assert np.allclose(fuse_commands([1, 2, 3], np.zeros(3), J), [1, 2, 3])
    assert np.allclose(fuse_commands(np.zeros(3), [1, 2, 3], J, lam=1e-4), [1, 2, 3], atol=1e-6)


@given(vec3, vec3, st.floats(0.01, 2.0))
def test_fusion_norm_bound(qm, um, lam):
    J = np.array([[1.0, 0.3, 0.0], [0.0, 0.0, 0.0], [0.2, 0.0, 1.0]])
    out = fuse_commands(qm, um, J, np.eye(3), lam)
    assert np.linalg.norm(out) <= fusion_norm_bound(qm, um, np.eye(3), lam) * (1 + 1e-9) + 1e-9


def test_legacy_equilibrium_and_rank_guard():
    p = LegacyParams()
    J = CameraModel(100.0, [0, 0], (10, 10)).L_img
    assert np.allclose(legacy_shared_step(np.zeros(3), np.zeros(3), np.zeros(2), np.eye(3), J, p), 0)
    with pytest.raises(ControlError):
        legacy_shared_step(np.zeros(3), np.zeros(3), np.zeros(2), np.eye(3), np.zeros((2, 3)), p)


def test_legacy_lyapunov_descends(rng):
    rig = Rig.default()
    for _ in range(5):
        _, V = legacy_rollout(rng.normal(size=3), rng.normal(scale=30, size=2), rig.R, rig.R,
                              rig.camera.L_img, LegacyParams(), 300)
        assert np.max(np.diff(V)) <= 1e-9


def test_hillclimb_stationary_and_plateau():
    rig = Rig.default()
    p = HillClimbParams()
    S = lambda z: sharpness_profile(rig, z)
    z, g = hillclimb_depth_step(rig.z_star, S, rig.z_star, p)
    assert abs(z - rig.z_star) < 1e-12
    z0 = rig.z_star + 3.5
    z, g = hillclimb_depth_step(z0, S, 0.0, p)
    assert g == 0.0 and np.sign(z - z0) == np.sign(0.0 - z0)


def test_direct_law_beats_hillclimb_from_2mm():
    rig = Rig.default()
    d = hz.depth_direct_steps(rig, rig.z_star + 2.0, 0)
    h = hz.depth_hillclimb_steps(rig, rig.z_star + 2.0, 0)
    assert d is not None and (h is None or d < h)
