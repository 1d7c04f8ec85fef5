"""Macro-micro shared control.

The operator's hand force drives a dead-zone admittance whose displacement is
tracked by a joint-velocity QP (macro layer).  Visual errors drive an LQR
micro layer that alternates between lateral servoing with the depth held by
a virtual fixture and depth regulation with lateral motion frozen.  Both are
summed in joint space through a damped resolved-rate inverse.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares, lsq_linear

from .geometry import damped_pinv, damped_pinv_bound, so3_log

LATERAL = "lateral_dominant"
DEPTH = "depth_dominant"

# Axial weights whose LQR gain on the servo-axis model (lag 0.2 s, dt 33.3 ms)
# equals K_z = [9.72, 2.73]; regenerate with search_depth_weights().
DEPTH_LAG_S = 0.2
DEPTH_Q_Z = (176.94921696, 17.21539038)
DEPTH_R_Z = 1.0


class ControlError(ValueError):
    pass


# ---------------------------------------------------------------- saturation / admittance

def sat_norm(u, vmax):
    """Scale ``u`` onto the ball of radius ``vmax``; never returns a norm above it."""
    u = np.asarray(u, dtype=float)
    n = float(np.linalg.norm(u))
    if n <= vmax:
        return u.copy()
    out = u * (vmax / n)
    while np.linalg.norm(out) > vmax:
        out = out * (1.0 - 2.0**-52)
    return out


def sat_scalar(u, vmax):
    return float(min(max(u, -vmax), vmax))


def deadzone(f, delta):
    f = np.asarray(f, dtype=float)
    d = np.broadcast_to(np.asarray(delta, dtype=float), f.shape)
    if np.any(d < 0):
        raise ControlError("dead-zone widths must be non-negative")
    return np.maximum(0.0, np.abs(f) - d) * np.sign(f)


@dataclass
class AdmittanceParams:
    M_d: np.ndarray = field(default_factory=lambda: np.ones(3))       # kg
    B_d: np.ndarray = field(default_factory=lambda: 12.0 * np.ones(3))  # N s / m
    delta: np.ndarray = field(default_factory=lambda: np.ones(3))      # N
    v_max: float = 0.01                                                # m/s
    dt: float = 0.0333

    def validate(self):
        if np.any(np.asarray(self.M_d) <= 0) or np.any(np.asarray(self.B_d) <= 0) or self.dt <= 0:
            raise ControlError("admittance parameters must be positive")
        return self


def admittance_step(v_prev, f_tilde, p):
    """One forward-Euler admittance step.

    Velocities in m/s, forces in N; returns ``(v_next, dp_mm)`` where the
    displacement uses the saturated velocity and is expressed in mm.
    """
    v = np.asarray(v_prev, dtype=float)
    v_next = v + p.dt * (np.asarray(f_tilde, float) - np.asarray(p.B_d) * v) / np.asarray(p.M_d)
    dp = sat_norm(v_next, p.v_max) * p.dt * 1000.0
    return v_next, dp


# ---------------------------------------------------------------- robot models

class CartesianGantry:
    """Three prismatic axes aligned with the base frame (J_p = I)."""

    n = 3

    def __init__(self, rotation=None):
        self.R0 = np.eye(3) if rotation is None else np.asarray(rotation, float)

    def fk(self, q):
        return np.asarray(q, float)[:3].copy(), self.R0

    def jacobian(self, q):
        return np.vstack([np.eye(3), np.zeros((3, 3))])


class PlanarArm4:
    """Three revolute joints in the horizontal plane plus a vertical slide.

    Redundant for planar positioning; link lengths in mm.
    """

    n = 4

    def __init__(self, links=(60.0, 50.0, 30.0)):
        self.l = np.asarray(links, float)

    def fk(self, q):
        q = np.asarray(q, float)
        a = np.cumsum(q[:3])
        x = float(np.sum(self.l * np.cos(a)))
        y = float(np.sum(self.l * np.sin(a)))
        c, s = math.cos(a[-1]), math.sin(a[-1])
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return np.array([x, y, q[3]]), R

    def jacobian(self, q):
        q = np.asarray(q, float)
        a = np.cumsum(q[:3])
        J = np.zeros((6, 4))
        for j in range(3):
            J[0, j] = -np.sum(self.l[j:] * np.sin(a[j:]))
            J[1, j] = np.sum(self.l[j:] * np.cos(a[j:]))
            J[5, j] = 1.0
        J[2, 3] = 1.0
        return J


# ---------------------------------------------------------------- macro QP

@dataclass
class MacroQPParams:
    W_p: np.ndarray = field(default_factory=lambda: 1e4 * np.eye(3))
    lambda_R: float = 0.0
    lambda_dq: float = 1e-6
    lower: np.ndarray = field(default_factory=lambda: -20.0 * np.ones(3))
    upper: np.ndarray = field(default_factory=lambda: 20.0 * np.ones(3))
    v_max: float = 10.0  # mm/s
    R_g: np.ndarray = field(default_factory=lambda: np.eye(3))
    dt: float = 0.0333

    def validate(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ControlError("infeasible joint-velocity box")
        if self.lambda_R < 0 or self.lambda_dq < 0 or self.dt <= 0:
            raise ControlError("invalid QP weights")
        return self


def _rotation_residual_jacobian(robot, q, R_g, h=1e-6):
    q = np.asarray(q, float)
    r0 = so3_log(R_g.T @ robot.fk(q)[1])
    J = np.zeros((3, len(q)))
    for i in range(len(q)):
        dq = np.zeros(len(q))
        dq[i] = h
        J[:, i] = (so3_log(R_g.T @ robot.fk(q + dq)[1]) - so3_log(R_g.T @ robot.fk(q - dq)[1])) / (2 * h)
    return r0, J


def qp_matrices(J_p, dp_adm, params, r0=None, J_r=None):
    """Least-squares form |A x - b|^2 of the macro objective."""
    dt = params.dt
    n = J_p.shape[1]
    Wh = np.linalg.cholesky(np.asarray(params.W_p, float) + 0.0 * np.eye(3)).T
    rows = [Wh @ J_p * dt]
    rhs = [Wh @ np.asarray(dp_adm, float)]
    if params.lambda_R > 0 and r0 is not None:
        rows.append(math.sqrt(params.lambda_R) * J_r * dt)
        rhs.append(-math.sqrt(params.lambda_R) * r0)
    if params.lambda_dq > 0:
        rows.append(math.sqrt(params.lambda_dq) * np.eye(n))
        rhs.append(np.zeros(n))
    return np.vstack(rows), np.concatenate(rhs)


def kkt_residual(A, b, x, lower, upper, tol_active=1e-12):
    """Largest violation of box-constrained least-squares optimality (relative)."""
    g = 2.0 * A.T @ (A @ x - b)
    r = np.zeros_like(g)
    at_lo = x <= lower + tol_active
    at_hi = x >= upper - tol_active
    free = ~(at_lo | at_hi)
    r[free] = np.abs(g[free])
    r[at_lo] = np.maximum(0.0, -g[at_lo])
    r[at_hi] = np.maximum(0.0, g[at_hi])
    scale = 1.0 + 2.0 * np.linalg.norm(A.T @ b)
    return float(np.max(r) / scale) if len(r) else 0.0


def solve_box_lsq(A, b, lower, upper):
    """Exact box-constrained least squares: BVLS then an active-set polish."""
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    res = lsq_linear(A, b, bounds=(lower, upper), method="bvls", tol=1e-14, lsmr_tol=None)
    x = np.clip(res.x, lower, upper)
    at_lo = np.isclose(x, lower, rtol=0, atol=1e-12)
    at_hi = np.isclose(x, upper, rtol=0, atol=1e-12)
    free = ~(at_lo | at_hi)
    if free.any():
        x_fix = np.where(at_lo, lower, np.where(at_hi, upper, 0.0))
        sol, *_ = np.linalg.lstsq(A[:, free], b - A[:, ~free] @ x_fix[~free], rcond=None)
        cand = x_fix.copy()
        cand[free] = sol
        if np.all(cand >= lower) and np.all(cand <= upper):
            x = cand
    return x


def macro_qp(J_p, J, dp_adm, q, params, robot=None):
    """Joint velocities tracking the admittance displacement.

    Returns ``(qdot, info)``; ``info['scaled']`` flags a post-hoc scaling to
    respect the Cartesian speed cap.
    """
    params.validate()
    J_p = np.atleast_2d(np.asarray(J_p, float))
    r0 = J_r = None
    if robot is not None and params.lambda_R > 0:
        r0, J_r = _rotation_residual_jacobian(robot, q, params.R_g)
    A, b = qp_matrices(J_p, dp_adm, params, r0, J_r)
    x = solve_box_lsq(A, b, params.lower, params.upper)
    kkt = kkt_residual(A, b, x, params.lower, params.upper)
    scaled = False
    v = float(np.linalg.norm(np.asarray(J, float) @ x))
    if v > params.v_max:
        x = x * (params.v_max / v)
        while np.linalg.norm(np.asarray(J, float) @ x) > params.v_max:
            x = x * (1.0 - 2.0**-52)
        scaled = True
    return x, {"kkt": kkt, "scaled": scaled}


# ---------------------------------------------------------------- LQR

def dare_gain(A, B, Q, R, tol=1e-12, max_iter=200000):
    """Riccati value iteration; returns ``(P, K)`` with u = -K x."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ControlError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ControlError("Q must be positive semidefinite")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ A - A.T @ P @ B @ G
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            break
        P = P_new
    else:
        raise ControlError("Riccati iteration did not converge")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = max(abs(np.linalg.eigvals(A - B @ K)))
    if rho >= 1.0 and np.any(K):
        raise ControlError(f"closed loop not stable (spectral radius {rho:.6f})")
    return P, K


def riccati_residual(A, B, Q, R, P):
    A, B, Q, R, P = (np.atleast_2d(np.asarray(v, float)) for v in (A, B, Q, R, P))
    G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(Q + A.T @ P @ A - A.T @ P @ B @ G - P)))


def servo_axis_model(dt, tau):
    """ZOH model of one axis whose velocity follows the command with lag ``tau``."""
    M = np.zeros((3, 3))
    M[0, 1] = 1.0
    M[1, 1] = -1.0 / tau
    M[1, 2] = 1.0 / tau
    E = expm(M * dt)
    return E[:2, :2], E[:2, 2:]


def search_depth_weights(K_target=(9.72, 2.73), dt=0.0333, tau=0.2, x0=(100.0, 10.0)):
    """Diagonal (Q_z, R_z = 1) whose LQR gain on the servo-axis model equals ``K_target``."""
    A, B = servo_axis_model(dt, tau)

    def resid(lq):
        _, K = dare_gain(A, B, np.diag(np.exp(lq)), np.eye(1), tol=1e-13)
        return K.ravel() - np.asarray(K_target)

    sol = least_squares(resid, np.log(x0), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    Q = np.diag(np.exp(sol.x))
    _, K = dare_gain(A, B, Q, np.eye(1), tol=1e-13)
    return Q, np.eye(1), K, (A, B)


def lateral_gain(dt=0.0333, q_fb=1600.0, r_fb=1.0):
    """Per-axis lateral gain from the integrator model (A=I, B=dt I)."""
    _, K = dare_gain(np.eye(2), dt * np.eye(2), q_fb * np.eye(2), r_fb * np.eye(2))
    return K


# ---------------------------------------------------------------- micro layer

@dataclass
class MicroGains:
    K_x: np.ndarray = None            # 2x2 position gain (1/s), from DARE
    K_xv: float = 0.0                 # optional gain on the unmodelled lateral rate
    K_z: np.ndarray = field(default_factory=lambda: np.array([9.72, 2.73]))
    Q_fb: float = 1600.0
    R_fb: float = 1.0
    v_x_max: float = 10.0             # mm/s
    v_z_max: float = 5.0              # mm/s
    delta_z: float = 0.03             # mm, focal tolerance
    lam: float = 0.1
    W_q: np.ndarray = None
    eps_coarse: float = 0.04          # mm, lateral error to hand over to depth
    hyst_enter: float = 0.1
    hyst_exit: float = 0.2
    settle_count: int = 3
    depth_enabled: bool = True
    dt: float = 0.0333

    def __post_init__(self):
        if self.K_x is None:
            self.K_x = lateral_gain(self.dt, self.Q_fb, self.R_fb)
        self.K_x = np.asarray(self.K_x, float)
        self.K_z = np.asarray(self.K_z, float).reshape(2)


@dataclass
class PhaseState:
    phase: str = LATERAL
    z_ref: float = 0.0
    settle: int = 0
    depth_pending: bool = True

    def copy(self):
        return PhaseState(self.phase, self.z_ref, self.settle, self.depth_pending)


def micro_step(e_lat_mm, e_lat_vel, ez_hat, phase, vis, gains, e_reg=(0.0, 0.0), z_axial=0.0):
    """Phase-gated micro command in camera-aligned task axes.

    ``e_lat_mm``/``e_lat_vel``: lifted lateral error and its unmodelled rate;
    ``ez_hat``: depth estimate (e_z, de_z); ``e_reg``: fixture error from
    robot kinematics (axial drift from the registered reference, axial rate);
    ``z_axial``: current axial coordinate, registered on phase changes.
    Returns ``(u_x, u_z, phase')`` with tip-error convention u = -K e.
    """
    ph = phase.copy()
    if not vis:
        return np.zeros(2), 0.0, ph
    e = np.asarray(e_lat_mm, float).reshape(2)
    en = float(np.linalg.norm(e))
    g = gains
    if ph.phase == LATERAL:
        if en > g.eps_coarse * (1 + g.hyst_exit):
            ph.depth_pending = True
        if g.depth_enabled and ph.depth_pending and en < g.eps_coarse * (1 - g.hyst_enter):
            ph.phase, ph.settle = DEPTH, 0
    elif en > g.eps_coarse * (1 + g.hyst_exit):
        ph.phase, ph.settle, ph.z_ref = LATERAL, 0, float(z_axial)

    if ph.phase == LATERAL:
        u_x = sat_norm(-(g.K_x @ e) - g.K_xv * np.asarray(e_lat_vel, float).reshape(2), g.v_x_max)
        u_z = sat_scalar(-float(g.K_z @ np.asarray(e_reg, float)), g.v_z_max)
        return u_x, u_z, ph

    ez = np.asarray(ez_hat, float).reshape(2)
    u_z = sat_scalar(-float(g.K_z @ ez), g.v_z_max)
    ph.settle = ph.settle + 1 if abs(ez[0]) <= g.delta_z else 0
    if ph.settle >= g.settle_count:
        ph.phase, ph.settle, ph.depth_pending, ph.z_ref = LATERAL, 0, False, float(z_axial)
        u_z = 0.0
    return np.zeros(2), u_z, ph


def fuse_commands(qdot_macro, u_micro, J_p, W_q=None, lam=0.1):
    return np.asarray(qdot_macro, float) + damped_pinv(J_p, W_q, lam) @ np.asarray(u_micro, float)


def fusion_norm_bound(qdot_macro, u_micro, W_q, lam):
    return float(np.linalg.norm(qdot_macro) + damped_pinv_bound(W_q, lam) * np.linalg.norm(u_micro))


# ---------------------------------------------------------------- legacy shared controller

@dataclass
class LegacyParams:
    lambda_t: float = 100.0
    B: np.ndarray = field(default_factory=lambda: 0.7 * np.eye(3))
    M: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(3))
    mu: float = 1.0
    P: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.0]))
    dt: float = 0.01


def _servo_matrix(J_img, R_hat):
    JR = np.asarray(J_img, float) @ np.asarray(R_hat, float)
    if np.linalg.matrix_rank(JR) < 2:
        raise ControlError("J_img R_hat lost row rank")
    return JR


def legacy_shared_step(xdot, F_ext, e_img, R_hat, J_img, params):
    """Commanded acceleration  M^-1 [mu (F - B xdot) + P lambda_t (J R)^+ e]."""
    JR = _servo_matrix(J_img, R_hat)
    rhs = params.mu * (np.asarray(F_ext, float) - params.B @ np.asarray(xdot, float))
    rhs = rhs + params.P @ (params.lambda_t * np.linalg.pinv(JR) @ np.asarray(e_img, float))
    return np.linalg.solve(params.M, rhs)


def legacy_lyapunov(xdot, e_img, R_true, J_img, params):
    """V = 1/2 xdot' M xdot + 1/2 k_e e' (JR JR')^-1 e with k_e = lambda_t^2 dt."""
    JR = _servo_matrix(J_img, R_true)
    k_e = params.lambda_t**2 * params.dt
    xdot = np.asarray(xdot, float)
    e = np.asarray(e_img, float)
    return float(0.5 * xdot @ params.M @ xdot + 0.5 * k_e * e @ np.linalg.solve(JR @ JR.T, e))


def legacy_closed_loop(R_hat, R_true, J_img, params):
    """Continuous closed-loop matrix on (xdot, e_img) with F_ext = 0.

    The image error obeys de/dt = -(1/lambda) J R xdot, lambda = lambda_t dt.
    """
    JRh = _servo_matrix(J_img, R_hat)
    JR = _servo_matrix(J_img, R_true)
    Minv = np.linalg.inv(params.M)
    lam = params.lambda_t * params.dt
    top = np.hstack([-params.mu * Minv @ params.B, Minv @ params.P @ (params.lambda_t * np.linalg.pinv(JRh))])
    bot = np.hstack([-JR / lam, np.zeros((2, 2))])
    return np.vstack([top, bot])


def legacy_rollout(xdot0, e0, R_hat, R_true, J_img, params, steps=500):
    """Exact sampled trajectory of the linear closed loop and its V values."""
    Acl = legacy_closed_loop(R_hat, R_true, J_img, params)
    Phi = expm(Acl * params.dt)
    x = np.concatenate([np.asarray(xdot0, float), np.asarray(e0, float)])
    xs, V = [x.copy()], [legacy_lyapunov(x[:3], x[3:], R_true, J_img, params)]
    for _ in range(steps):
        x = Phi @ x
        xs.append(x.copy())
        V.append(legacy_lyapunov(x[:3], x[3:], R_true, J_img, params))
    return np.array(xs), np.array(V)


# ---------------------------------------------------------------- sharpness hill-climb baseline

@dataclass
class HillClimbParams:
    rho: float = 0.5
    rho_min: float = 0.05
    rho_max: float = 1.0
    gamma: float = 1.0
    lam_prior: float = 0.01
    h: float = 0.05          # mm, finite-difference half step
    max_step: float = 0.1665  # mm per cycle (same speed cap as the micro law)
    stop_fraction: float = 0.97
    window: int = 3


def hillclimb_depth_step(z_cmd, sharpness_fn, z_prior, params):
    """One trust-region ascent step on measured sharpness; returns (z_next, gradient)."""
    rho = min(max(params.rho, params.rho_min), params.rho_max)
    g = (sharpness_fn(z_cmd + params.h) - sharpness_fn(z_cmd - params.h)) / (2.0 * params.h)
    dz = rho * params.gamma * (g - 2.0 * params.lam_prior * (z_cmd - z_prior))
    dz = max(-params.max_step, min(params.max_step, dz))
    return z_cmd + dz, g


def hillclimb_should_stop(recent_sharpness, peak_estimate, params):
    """Stop once the regional average sharpness reaches a fraction of the peak."""
    if len(recent_sharpness) < params.window:
        return False
    return float(np.mean(recent_sharpness[-params.window:])) >= params.stop_fraction * peak_estimate
