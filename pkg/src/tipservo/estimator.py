"""Tip state estimation with soft-gated Kalman filters.

Two decoupled constant-velocity channels track the tip error relative to
the target: planar (px, px/s) and axial (mm, mm/s).  Each observation is
weighted by a reliability score built from detector confidence and a
conformally calibrated innovation test, so unreliable frames shrink the
gain instead of being accepted or dropped outright.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

H_X = np.hstack([np.eye(2), np.zeros((2, 2))])
H_Z = np.array([[1.0, 0.0]])
COLD_POS_VAR = 50.0**2
COLD_VEL_VAR = 100.0**2
DEFAULT_CROP_OFFSETS = ((0, 0), (10, 0), (-10, 0), (0, 10), (0, -10))


@dataclass
class GateParams:
    tau_x: float = 6.30
    sigma2_x0: float = 4.0
    gamma_x: float = 1.0
    tau_z: float = 1.0
    sigma2_z0: float = 0.003**2
    gamma_z: float = 1.0
    level: float = 0.95
    q: float = 5.991464547107979  # chi-square(2) 95 % until calibrated
    tau_det: float = 0.35
    tau_loss: float = 0.2
    tau_safe: float = 0.05
    T_max: float = 1.0
    dt: float = 1.0 / 30.0
    q0x: float = 2000.0   # px^2 / s^3
    q0z: float = 0.05     # mm^2 / s^3
    watchdog: bool = True

    def validate(self):
        for name in ("tau_x", "sigma2_x0", "gamma_x", "tau_z", "sigma2_z0", "gamma_z", "q",
                     "tau_det", "tau_loss", "tau_safe", "T_max", "dt", "q0x", "q0z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.level < 1.0:
            raise ValueError("coverage level must lie in (0, 1)")
        return self

    @property
    def n_max(self):
        return int(math.ceil(self.T_max / self.dt - 1e-9))


@dataclass
class FilterState:
    ex: np.ndarray = field(default_factory=lambda: np.zeros(4))
    Px: np.ndarray = field(default_factory=lambda: np.diag([COLD_POS_VAR] * 2 + [COLD_VEL_VAR] * 2))
    ez: np.ndarray = field(default_factory=lambda: np.zeros(2))
    Pz: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    last_valid_x: float = 0.0
    last_valid_z: float = 0.0
    init_x: bool = False
    init_z: bool = False
    t: float = 0.0

    def copy(self):
        return replace(self, ex=self.ex.copy(), Px=self.Px.copy(), ez=self.ez.copy(), Pz=self.Pz.copy())

    def snapshot(self):
        return {"t": self.t, "ex": self.ex.tolist(), "trPx": float(np.trace(self.Px)),
                "ez": self.ez.tolist(), "trPz": float(np.trace(self.Pz)),
                "init_x": self.init_x, "init_z": self.init_z}


# ---------------------------------------------------------------- model blocks

def transition(dt, dim):
    I = np.eye(dim)
    return np.block([[I, dt * I], [np.zeros((dim, dim)), I]])


def process_noise(dt, q0, dim):
    """Integrated white-acceleration covariance for a constant-velocity model."""
    I = np.eye(dim)
    return q0 * np.block([[dt**3 / 3 * I, dt**2 / 2 * I], [dt**2 / 2 * I, dt * I]])


def _sym_psd(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < 0:
        P = (V * np.maximum(w, 0.0)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def _predict_channel(e, P, dt, q0, dim, u=None):
    F = transition(dt, dim)
    e = F @ e
    if u is not None:
        e[:dim] = e[:dim] + dt * np.asarray(u, dtype=float).reshape(dim)
    return e, _sym_psd(F @ P @ F.T + process_noise(dt, q0, dim))


def predict(state, dt, q0x, q0z, u_x=None, u_z=None):
    """Propagate both channels by ``dt``.

    ``u_x`` (px/s) and ``u_z`` (mm/s) are known commanded rates of the tip;
    the velocity states then only carry motion the controller did not cause.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = state.copy()
    s.ex, s.Px = _predict_channel(s.ex, s.Px, dt, q0x, 2, u_x)
    s.ez, s.Pz = _predict_channel(s.ez, s.Pz, dt, q0z, 1, None if u_z is None else [u_z])
    s.t = state.t + dt
    return s


# ---------------------------------------------------------------- gating

def nonconformity(innovation, S):
    eps = np.asarray(innovation, dtype=float).reshape(-1)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is not positive definite") from exc
    z = np.linalg.solve(L, eps)
    return float(z @ z)


def conformal_calibrate(scores, level=0.95):
    """Smallest score whose empirical CDF reaches ``level``."""
    s = np.sort(np.asarray(scores, dtype=float).reshape(-1))
    if len(s) == 0:
        raise ValueError("no calibration scores")
    k = min(len(s), max(1, int(math.ceil(len(s) * level - 1e-9))))
    return float(s[k - 1])


def fuse_score(conf, d2, q):
    if q <= 0:
        raise ValueError("q must be positive")
    return float(min(conf, max(0.0, 1.0 - d2 / q)))


def gated_update(e, P, y, H, R, g):
    """Kalman correction with the gain scaled by ``g`` in [0, 1]."""
    H = np.atleast_2d(H)
    S = H @ P @ H.T + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    eps = np.asarray(y, dtype=float).reshape(-1) - H @ e
    e_new = e + g * (K @ eps)
    P_new = (np.eye(len(e)) - g * K @ H) @ P
    return e_new, _sym_psd(P_new), eps, S


def gated_update_planar(state, pixel_obs, target, conf, params, now=None):
    """Soft-gated planar correction; returns ``(state, diagnostics)``."""
    s = state.copy()
    now = s.t if now is None else now
    diag = {"g": 0.0, "s": 0.0, "d2": float("nan"), "R": float("nan"), "cold_start": False}
    if pixel_obs is None or conf is None or not np.all(np.isfinite(pixel_obs)):
        return s, diag
    y = np.asarray(pixel_obs, float) - np.asarray(target, float)
    if not s.init_x:
        if conf <= params.tau_det:
            return s, diag
        s.ex = np.array([y[0], y[1], 0.0, 0.0])
        s.Px = np.diag([COLD_POS_VAR] * 2 + [COLD_VEL_VAR] * 2)
        s.init_x, s.last_valid_x = True, now
        diag.update(g=1.0, s=float(conf), cold_start=True)
        return s, diag
    R0 = params.sigma2_x0 * np.eye(2)
    eps = y - H_X @ s.ex
    d2 = nonconformity(eps, H_X @ s.Px @ H_X.T + R0)
    sc = fuse_score(conf, d2, params.q)
    g = float(np.clip(sc / params.tau_x, 0.0, 1.0))
    R = params.sigma2_x0 * math.exp(-params.gamma_x * sc) * np.eye(2)
    s.ex, s.Px, _, _ = gated_update(s.ex, s.Px, y, H_X, R, g)
    if g > params.tau_safe:
        s.last_valid_x = now
    diag.update(g=g, s=sc, d2=d2, R=float(R[0, 0]))
    return s, diag


def fuse_depth_crops(estimates, params):
    """Mean/std of per-crop depth estimates and the consistency gate."""
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if len(est) < 2:
        raise ValueError("need at least two crop estimates")
    y = float(est.mean())
    S = float(est.std())
    g = float(np.clip(1.0 - S / params.tau_z, 0.0, 1.0))
    R = params.sigma2_z0 * math.exp(params.gamma_z * S)
    return y, S, g, R


def gated_update_depth(state, estimates, params, now=None):
    s = state.copy()
    now = s.t if now is None else now
    if estimates is None:
        return s, {"g": 0.0, "S": float("nan")}
    y, S, g, R = fuse_depth_crops(estimates, params)
    if not s.init_z:
        if g <= params.tau_safe:
            return s, {"g": 0.0, "S": S}
        s.ez = np.array([y, 0.0])
        s.Pz = np.diag([max(R, 1e-4), 1.0])
        s.init_z, s.last_valid_z = True, now
        return s, {"g": 1.0, "S": S, "cold_start": True}
    s.ez, s.Pz, _, _ = gated_update(s.ez, s.Pz, [y], H_Z, np.array([[R]]), g)
    if g > params.tau_safe:
        s.last_valid_z = now
    return s, {"g": g, "S": S, "R": R}


def watchdog(state, now, params):
    """Reset a channel once it has gone ``n_max`` steps without a trusted update."""
    s = state.copy()
    events = []
    if not params.watchdog:
        return s, events
    horizon = params.n_max * params.dt - 1e-9
    if s.init_x and now - s.last_valid_x >= horizon:
        s.init_x = False
        events.append("reset_x")
    if s.init_z and now - s.last_valid_z >= horizon:
        s.init_z = False
        events.append("reset_z")
    return s, events


def covariance_trace_bound(F, Q, trace_P_last, n_steps):
    """Worst-case trace of P after ``n_steps`` open-loop predictions.

    Uses trace(A B A^T) <= |A|_2^2 trace(B) for PSD B on every term of the
    unrolled recursion.
    """
    f2 = np.linalg.norm(F, 2) ** 2
    trQ = float(np.trace(Q))
    return float(sum(f2**k for k in range(n_steps + 1)) * trQ + f2**n_steps * trace_P_last)


def lift_planar_error(e_pos_px, R_hat, cam):
    """Task-space (robot frame, mm) displacement explaining a pixel error."""
    A = cam.L_img @ np.asarray(R_hat, float)
    if np.linalg.matrix_rank(A) < 2:
        raise ValueError("projected rotation lost rank")
    return np.linalg.pinv(A) @ np.asarray(e_pos_px, float).reshape(2)


def camera_lateral_error_mm(e_pos_px, cam):
    return np.asarray(e_pos_px, float).reshape(2) / cam.scale


# ---------------------------------------------------------------- candidate scoring

@dataclass
class FusionParams:
    w_h: float = 0.15
    w_m: float = 0.3
    w_t: float = 0.3
    w_d: float = 0.15
    w_c: float = 0.1
    lambda_m: float = 6.0
    lambda_t: float = 6.0
    lambda_d: float = 10.0
    D_max: float = 40.0
    tau_c: float = 0.1
    tau_p: float = 0.5
    tau_s: float = 0.25
    R_fb: float = 60.0
    heat_windows: tuple = (5, 11, 21)
    heat_z_cap: float = 3.0
    history: int = 5

    def validate(self):
        w = np.array([self.w_h, self.w_m, self.w_t, self.w_d, self.w_c])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("fusion weights must be non-negative and sum to 1")
        if not self.tau_p > self.tau_s:
            raise ValueError("primary threshold must exceed secondary threshold")
        return self

    @property
    def temporal_dominant(self):
        return self.w_m + self.w_t > self.w_h


@dataclass
class Peak:
    pixel: np.ndarray
    heat: float
    conf: float


def heat_zscore_maps(H, windows=(5, 11, 21)):
    H = np.asarray(H, dtype=float)
    maps = []
    for k in windows:
        mu = ndimage.uniform_filter(H, size=k, mode="nearest")
        m2 = ndimage.uniform_filter(H * H, size=k, mode="nearest")
        sd = np.sqrt(np.maximum(m2 - mu * mu, 1e-12))
        maps.append((H - mu) / sd)
    return np.mean(maps, axis=0)


def extract_peaks(H, params, last_pos=None, cold=False):
    """Local maxima of a response map, with threshold fallbacks."""
    H = np.asarray(H, dtype=float)
    is_max = (H == ndimage.maximum_filter(H, size=3, mode="nearest"))
    ys, xs = np.nonzero(is_max & (H >= min(params.tau_c, params.tau_s)))
    if len(xs) == 0:
        return []
    vals = H[ys, xs]
    pts = np.column_stack([xs, ys]).astype(float)
    Z = heat_zscore_maps(H, params.heat_windows)
    heat = np.clip(Z[ys, xs] / params.heat_z_cap, 0.0, 1.0)
    if cold:
        order = np.argsort(-vals, kind="stable")[:5]
        sel = [i for i in order if vals[i] > params.tau_c]
    else:
        sel = list(np.flatnonzero(vals >= params.tau_p))
        if not sel and last_pos is not None:
            near = np.linalg.norm(pts - np.asarray(last_pos, float), axis=1) <= params.R_fb
            sel = list(np.flatnonzero(near & (vals >= params.tau_s)))
    return [Peak(pts[i], float(heat[i]), float(vals[i])) for i in sel]


def candidate_scores(peaks, history, kf_prediction, params):
    """Per-candidate late-fusion score and its components."""
    hist = [np.asarray(h, float) for h in history]
    out = []
    for pk in peaks:
        p = np.asarray(pk.pixel, float)
        if len(hist) >= 2:
            steps = np.diff(np.array(hist[-(params.history + 1):]), axis=0)
            d_bar = steps.mean(axis=0)
            v = steps[-1]
            s_m = math.exp(-np.linalg.norm(p - (hist[-1] + d_bar)) / params.lambda_m)
            s_t = math.exp(-np.linalg.norm(p - (hist[-1] + v)) / params.lambda_t)
        elif len(hist) == 1:
            s_m = s_t = math.exp(-np.linalg.norm(p - hist[-1]) / params.lambda_m)
        else:
            s_m = s_t = 0.0
        if kf_prediction is not None:
            d = np.linalg.norm(p - np.asarray(kf_prediction, float))
            s_d = math.exp(-d / params.lambda_d) if d <= params.D_max else 0.0
        else:
            s_d = 0.0
        total = (params.w_h * pk.heat + params.w_m * s_m + params.w_t * s_t
                 + params.w_d * s_d + params.w_c * pk.conf)
        out.append({"heat": pk.heat, "motion": s_m, "temp": s_t, "dist": s_d, "total": total})
    return out


def select_candidate(peaks, history, kf_prediction, params):
    """Highest late-fusion score among peaks; ``(None, 0.0)`` when lost."""
    if not peaks:
        return None, 0.0
    sc = candidate_scores(peaks, history, kf_prediction, params)
    tot = np.array([c["total"] for c in sc])
    k = int(np.argmax(tot))
    return np.asarray(peaks[k].pixel, float), float(tot[k])


# ---------------------------------------------------------------- streaming tracker

class SoftGatedTipTracker(BaseEstimator):
    """Streaming tracker.  ``fit`` calibrates the gate quantile from a log;
    ``feed`` consumes one frame record at a time.

    A frame record is a dict with ``t``, optional ``px`` (pixel), ``conf``,
    ``depth_crops`` (list of per-crop depth estimates), ``target`` (pixel)
    and ``u_px`` / ``u_z`` (known commanded tip rates).
    """

    def __init__(self, tau_x=6.30, sigma2_x0=4.0, gamma_x=1.0, tau_z=1.0, sigma2_z0=0.003**2,
                 gamma_z=1.0, level=0.95, tau_det=0.35, tau_loss=0.2, tau_safe=0.05, T_max=1.0,
                 dt=1.0 / 30.0, q0x=2000.0, q0z=0.05, watchdog=True):
        self.tau_x = tau_x
        self.sigma2_x0 = sigma2_x0
        self.gamma_x = gamma_x
        self.tau_z = tau_z
        self.sigma2_z0 = sigma2_z0
        self.gamma_z = gamma_z
        self.level = level
        self.tau_det = tau_det
        self.tau_loss = tau_loss
        self.tau_safe = tau_safe
        self.T_max = T_max
        self.dt = dt
        self.q0x = q0x
        self.q0z = q0z
        self.watchdog = watchdog

    def gate_params(self, q=None):
        p = GateParams(self.tau_x, self.sigma2_x0, self.gamma_x, self.tau_z, self.sigma2_z0,
                       self.gamma_z, self.level, GateParams.q if q is None else q, self.tau_det,
                       self.tau_loss, self.tau_safe, self.T_max, self.dt, self.q0x, self.q0z,
                       self.watchdog)
        return p.validate()

    def fit(self, X, y=None, target=None):
        """Calibrate the innovation quantile on a held-out log (full-trust replay)."""
        params = self.gate_params()
        target = np.zeros(2) if target is None else np.asarray(target, float)
        st = FilterState()
        scores = []
        prev_t = None
        R0 = params.sigma2_x0 * np.eye(2)
        for i in range(len(X)):
            t = float(X.t[i])
            if prev_t is not None:
                st = predict(st, t - prev_t, params.q0x, params.q0z)
            prev_t = t
            if not X.valid[i]:
                continue
            yv = X.px[i] - target
            if not st.init_x:
                st.ex = np.array([yv[0], yv[1], 0.0, 0.0])
                st.init_x = True
                continue
            S = H_X @ st.Px @ H_X.T + R0
            scores.append(nonconformity(yv - H_X @ st.ex, S))
            st.ex, st.Px, _, _ = gated_update(st.ex, st.Px, yv, H_X, R0, 1.0)
        burn = min(len(scores) // 10, 50)
        self.calibration_scores_ = np.asarray(scores[burn:])
        self.q_ = conformal_calibrate(self.calibration_scores_, self.level)
        return self.reset()

    def reset(self):
        self.state_ = FilterState()
        self.params_ = self.gate_params(getattr(self, "q_", None))
        self._last_t = None
        return self

    def feed(self, rec):
        if not hasattr(self, "state_"):
            self.reset()
        p = self.params_
        t = float(rec["t"])
        st = self.state_
        if self._last_t is not None:
            st = predict(st, t - self._last_t, p.q0x, p.q0z, rec.get("u_px"), rec.get("u_z"))
        else:
            st = st.copy()
            st.t = t
        self._last_t = t
        target = rec.get("target", np.zeros(2))
        st, dx = gated_update_planar(st, rec.get("px"), target, rec.get("conf"), p, t)
        st, dz = gated_update_depth(st, rec.get("depth_crops"), p, t)
        st, events = watchdog(st, t, p)
        self.state_ = st
        snap = st.snapshot()
        snap.update(gx=dx["g"], sx=dx["s"], d2=dx["d2"], gz=dz["g"], events=events)
        return snap

    def retarget(self, old_target, new_target):
        """Shift the planar error when the pixel target changes."""
        check_is_fitted(self, "state_")
        self.state_.ex[:2] += np.asarray(old_target, float) - np.asarray(new_target, float)
