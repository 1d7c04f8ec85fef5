"""Markerless hand-eye rotation calibration from unsynchronized tip tracks.

The proposed estimator matches the projected robot tip track against the
detected pixel track as *sets* (bidirectional Chamfer), so per-frame
timestamp errors only cost a nearest-neighbour hop instead of a full
correspondence error.  Two baselines and the evaluation metrics live here
as well.
"""

from dataclasses import dataclass, field
import logging
import time

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.stats import qmc
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import (CameraModel, EulerZYX, ToolOffset, euler_to_rotation, project_perspective,
                       project_weak, rot_interaction, rotation_angle, rotation_to_euler, to_camera)

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 0.12
DEFAULT_LAMBDA_VEL = 0.10
DEFAULT_VAR_CAP = 10.0  # mm^2
DEFAULT_TILT = 0.35


class CalibrationError(RuntimeError):
    """Raised when a calibration problem cannot be solved."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or []


# ---------------------------------------------------------------- loss kernels

def _points(P, name):
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    if len(P) == 0:
        raise ValueError(f"{name} is empty")
    return P


def nn_distances(P, Q):
    """Distance from each point of P to its nearest neighbour in Q."""
    d, _ = cKDTree(Q).query(P, k=1)
    return d


def chamfer_bidirectional(P, Q):
    P, Q = _points(P, "P"), _points(Q, "Q")
    return 0.5 * nn_distances(P, Q).mean() + 0.5 * nn_distances(Q, P).mean()


def chamfer_squared_mean(P, Q):
    P, Q = _points(P, "P"), _points(Q, "Q")
    return float((nn_distances(P, Q) ** 2).mean() + (nn_distances(Q, P) ** 2).mean())


def paired_squared_mean(P, Q):
    """Mean squared distance under the fixed index correspondence."""
    P, Q = _points(P, "P"), _points(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError("paired sets must have equal length")
    return float(np.mean(np.sum((P - Q) ** 2, axis=1)))


def huber(r, kappa):
    a = np.abs(r)
    return np.where(a <= kappa, 0.5 * r**2, kappa * (a - 0.5 * kappa))


def _valid_pairs(valid):
    idx = np.flatnonzero(valid)
    return idx[:-1], idx[1:]


def _velocity_residuals(px_obs, p3d, valid, R, t_vec, cam, delta_phi):
    i, j = _valid_pairs(valid)
    if len(i) == 0:
        raise ValueError("no valid consecutive pairs")
    dq = px_obs[j] - px_obs[i]
    dp = (p3d[j] - p3d[i]) @ R.T
    pred = cam.scale * dp[:, :2]
    if delta_phi is not None and np.any(delta_phi):
        pc = to_camera(R, t_vec, p3d[i])
        wx, wy, wz = delta_phi
        s = cam.scale
        # rows of rot_interaction applied to delta_phi for every point
        pred = pred + np.column_stack([-s * (-pc[:, 2] * wy + pc[:, 1] * wz),
                                       -s * (pc[:, 2] * wx - pc[:, 0] * wz)])
    return dq - pred


def velocity_loss(log_, R, cam, delta_phi=None, kappa=DEFAULT_KAPPA, p3d=None, t_vec=None,
                  reduction="mean"):
    """Huber penalty on frame-to-frame pixel increments versus robot increments.

    Pairs join consecutive *valid* frames, so a gap is bridged rather than
    skipped.  ``reduction='mean'`` averages over pairs (summing components);
    ``'sum'`` returns the plain total.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    p3d = log_.tip3d if p3d is None else p3d
    t_vec = np.zeros(3) if t_vec is None else t_vec
    dphi = None if delta_phi is None else np.asarray(delta_phi, dtype=float)
    r = _velocity_residuals(log_.px, p3d, log_.valid, np.asarray(R, float), t_vec, cam, dphi)
    per_pair = huber(r, kappa).sum(axis=1)
    return float(per_pair.sum() if reduction == "sum" else per_pair.mean())


# ---------------------------------------------------------------- data types

@dataclass
class CalibResult:
    euler: EulerZYX
    R: np.ndarray
    r_tip: ToolOffset
    t_vec: np.ndarray
    delta_phi: np.ndarray
    losses: dict
    diagnostics: dict = field(default_factory=dict)
    feasible: bool = True
    method: str = "bichamfer"
    projection: str = "weak"

    def to_dict(self):
        return {"method": self.method, "projection": self.projection,
                "euler": self.euler.as_array().tolist(), "R": self.R.tolist(),
                "r_tip": self.r_tip.r_tip.tolist(), "t_vec": self.t_vec.tolist(),
                "delta_phi": self.delta_phi.tolist(), "losses": self.losses,
                "diagnostics": self.diagnostics, "feasible": self.feasible}


def _bounds(tilt=DEFAULT_TILT):
    return (np.array([-tilt, -tilt, -np.pi]), np.array([tilt, tilt, np.pi]))


@dataclass
class CalibProblem:
    log: object
    camera: CameraModel
    lambda_vel: float = DEFAULT_LAMBDA_VEL
    kappa: float = DEFAULT_KAPPA
    a_t: float = 1e-3
    lower: np.ndarray = field(default_factory=lambda: _bounds()[0])
    upper: np.ndarray = field(default_factory=lambda: _bounds()[1])
    var_cap: float = DEFAULT_VAR_CAP
    n_starts: int = 4
    seed: int = 0
    r_tip_init: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tool_length_bound: float = 100.0
    freeze_tilt: bool = False
    tilt_values: tuple = (0.0, 0.0)

    def validate(self):
        valid = np.asarray(self.log.valid, bool)
        if valid.sum() < 2 or len(self.log) < 2:
            raise CalibrationError("need at least two valid frames")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.lambda_vel < 0 or self.a_t < 0:
            raise ValueError("weights must be non-negative")
        return self


# ---------------------------------------------------------------- optimizer core

class _Objective:
    """Packs the decision vector and evaluates the calibration objective."""

    def __init__(self, problem, pairing="chamfer", projection="weak"):
        lg = problem.log
        self.p = problem
        self.cam = problem.camera
        self.pairing = pairing
        self.projection = projection
        self.valid = np.asarray(lg.valid, bool)
        self.Ree = lg.rotations()
        self.tee = lg.translations()
        self.q_all = lg.px
        self.Q = lg.px[self.valid]
        self.qtree = cKDTree(self.Q)
        # with a constant tool orientation the tip offset is indistinguishable
        # from a translation offset, so it is held at its initial value
        spread = np.max(np.abs(self.Ree - self.Ree[0])) if len(self.Ree) else 0.0
        self.fit_tip = spread > 1e-6
        self.fit_tilt = not problem.freeze_tilt
        self.penalty = 0.0

    # layout: [tilt(2) if fit_tilt] + [theta_z] + [r_tip(3) if fit_tip] + [t_xy(2)] + [dphi(3)]
    def pack(self, theta, r_tip, t_xy, dphi):
        parts = [theta[:2]] if self.fit_tilt else []
        parts += [theta[2:3]]
        if self.fit_tip:
            parts.append(r_tip)
        parts += [t_xy, dphi]
        return np.concatenate(parts)

    def unpack(self, x):
        i = 0
        if self.fit_tilt:
            tilt = x[0:2]
            i = 2
        else:
            tilt = np.asarray(self.p.tilt_values, float)
        theta = np.array([tilt[0], tilt[1], x[i]])
        i += 1
        if self.fit_tip:
            r = x[i:i + 3]
            i += 3
        else:
            r = np.asarray(self.p.r_tip_init, float)
        t = np.array([x[i], x[i + 1], 0.0])
        dphi = x[i + 2:i + 5]
        return theta, r, t, dphi

    def bounds(self):
        b = []
        if self.fit_tilt:
            b += list(zip(self.p.lower[:2], self.p.upper[:2]))
        b.append((self.p.lower[2], self.p.upper[2]))
        if self.fit_tip:
            L = self.p.tool_length_bound / np.sqrt(3)
            b += [(-L, L)] * 3
        b += [(None, None)] * 2 + [(-0.2, 0.2)] * 3
        return b

    def tip3d(self, r):
        return np.einsum("nij,j->ni", self.Ree, r) + self.tee

    def project(self, R, t, p3d):
        if self.projection == "perspective":
            return project_perspective(self.cam, R, t, p3d)
        return project_weak(self.cam, R, t, p3d)

    def terms(self, x):
        theta, r, t, dphi = self.unpack(x)
        R = euler_to_rotation(theta)
        p3d = self.tip3d(r)
        P = self.project(R, t, p3d)
        if self.pairing == "chamfer":
            d_pq, _ = self.qtree.query(P, k=1)
            d_qp, _ = cKDTree(P).query(self.Q, k=1)
            match = 0.5 * d_pq.mean() + 0.5 * d_qp.mean()
        else:
            match = np.linalg.norm(P[self.valid] - self.Q, axis=1).mean()
        vel = 0.0
        if self.p.lambda_vel > 0:
            res = _velocity_residuals(self.q_all, p3d, self.valid, R, t, self.cam, dphi)
            vel = huber(res, self.p.kappa).sum(axis=1).mean()
        reg = self.p.a_t * np.linalg.norm(t)
        var = float(np.mean(np.sum((p3d - p3d.mean(axis=0)) ** 2, axis=1)))
        return match, vel, reg, var

    def __call__(self, x):
        match, vel, reg, var = self.terms(x)
        pen = self.penalty * max(0.0, var - self.p.var_cap) ** 2
        return match + self.p.lambda_vel * vel + reg + pen


def _procrustes_rotation(G, scale):
    """Closest rotation whose first two rows match G / scale."""
    A = np.asarray(G, float) / scale
    r3 = np.cross(A[0], A[1])
    M = np.vstack([A, r3 / max(np.linalg.norm(r3), 1e-12)])
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def regress_image_jacobian(log_, ridge=1e-6, min_pairs=6):
    """Least-squares G with  delta_px ~= G @ delta_p3d  over consecutive valid pairs."""
    i, j = _valid_pairs(np.asarray(log_.valid, bool))
    if len(i) < min_pairs:
        raise CalibrationError(f"need at least {min_pairs} valid velocity pairs")
    X = log_.tip3d[j] - log_.tip3d[i]
    Y = log_.px[j] - log_.px[i]
    XtX = X.T @ X
    ev = np.linalg.eigvalsh(XtX)
    if ev[-1] <= 0 or ev[1] < 1e-9 * ev[-1]:
        raise CalibrationError("robot motion does not excite two independent directions")
    G = np.linalg.solve(XtX + ridge * np.trace(XtX) / 3 * np.eye(3), X.T @ Y).T
    return G


def _clip_theta(theta, lower, upper):
    return np.clip(theta, lower + 1e-9, upper - 1e-9)


def solve(problem, pairing="chamfer", projection="weak", method_name=None):
    """Multi-start bounded quasi-Newton solve of the calibration objective."""
    problem.validate()
    obj = _Objective(problem, pairing, projection)
    cam = problem.camera
    lo, hi = np.asarray(problem.lower, float), np.asarray(problem.upper, float)

    starts = []
    try:
        G = regress_image_jacobian(problem.log)
        starts.append(rotation_to_euler(_procrustes_rotation(G, cam.scale)))
    except (CalibrationError, ValueError, np.linalg.LinAlgError) as exc:
        log.debug("warm start unavailable: %s", exc)
    n_grid = max(problem.n_starts - len(starts), 0)
    if n_grid:
        m = int(np.ceil(np.log2(n_grid)))
        sob = qmc.Sobol(d=3, scramble=True, seed=problem.seed).random_base2(m)[:n_grid]
        starts += list(lo + sob * (hi - lo))
    if obj.fit_tilt is False:
        starts = [np.array([*problem.tilt_values, s[2]]) for s in starts]

    r0 = np.asarray(problem.r_tip_init, float)
    p3d0 = obj.tip3d(r0)
    diag, best = [], None
    for k, th in enumerate(starts):
        th = _clip_theta(np.asarray(th, float), lo, hi)
        R0 = euler_to_rotation(th)
        proj_mean = (R0 @ p3d0.T).T[:, :2].mean(axis=0)
        t0 = (obj.Q.mean(axis=0) - cam.principal_point) / cam.scale - proj_mean
        x0 = obj.pack(th, r0, t0, np.zeros(3))
        obj.penalty = 0.0
        f_start = obj(x0)
        x, feasible = x0, True
        try:
            for ramp in range(6):
                res = minimize(obj, x, method="L-BFGS-B", bounds=obj.bounds(),
                               options={"maxiter": 300, "ftol": 1e-12, "gtol": 1e-9})
                x = res.x
                var = obj.terms(x)[3]
                feasible = var <= problem.var_cap * (1 + 1e-9)
                if feasible:
                    break
                obj.penalty = 10.0 ** (ramp + 1)
            obj.penalty = 0.0
            f = obj(x)
            if not np.isfinite(f):
                raise FloatingPointError("non-finite objective")
            if f > f_start:  # never return something worse than where we began
                x, f = x0, f_start
            diag.append({"start": k, "f_start": float(f_start), "f": float(f),
                         "feasible": bool(feasible), "message": str(res.message)})
            key = (not feasible, f, k)
            if best is None or key < best[0]:
                best = (key, x, feasible)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            diag.append({"start": k, "error": str(exc)})
    if best is None:
        raise CalibrationError("all starts failed", diag)

    _, x, feasible = best
    theta, r, t, dphi = obj.unpack(x)
    match, vel, reg, var = obj.terms(x)
    if not feasible:
        log.warning("motion-variance constraint could not be met (Var=%.4g > %.4g)", var, problem.var_cap)
    e = EulerZYX(*theta, lower=tuple(lo), upper=tuple(hi))
    result = CalibResult(e, euler_to_rotation(theta), ToolOffset(r, problem.tool_length_bound), t, dphi,
                         {"match": float(match), "vel": float(vel), "reg": float(reg),
                          "total": float(match + problem.lambda_vel * vel + reg), "var_p3d": var},
                         {"starts": diag}, bool(feasible), method_name or pairing, projection)
    result.diagnostics.update(metrics_report(problem.log, result, camera=cam))
    return result


def calibrate(problem):
    return solve(problem, "chamfer", "weak", "bichamfer")


def baseline_euclidean(log_, cam, lower=None, upper=None, **kw):
    """Same objective with index-paired point distances instead of Chamfer."""
    b = _bounds()
    p = CalibProblem(log_, cam, lower=b[0] if lower is None else lower,
                     upper=b[1] if upper is None else upper, **kw)
    return solve(p, "euclidean", "weak", "euclidean")


def baseline_pnp_stub(log_, cam, **kw):
    """Index-paired fit through the fixed-plane perspective model.

    Stand-in for a manual-correspondence PnP baseline; labelled as such.
    """
    p = CalibProblem(log_, cam, **kw)
    return solve(p, "euclidean", "perspective", "pnp_stub_index_paired")


def baseline_jacobian_regression(log_, cam, ridge=1e-6):
    """Regress G ~ L_img R from velocity pairs; returns (G, CalibResult)."""
    G = regress_image_jacobian(log_, ridge)
    R = _procrustes_rotation(G, cam.scale)
    valid = np.asarray(log_.valid, bool)
    offset = (log_.px[valid] - log_.tip3d[valid] @ G.T).mean(axis=0)
    t_xy = (offset - cam.principal_point) / cam.scale
    theta = rotation_to_euler(R)
    lo, hi = _bounds(np.pi / 2 - 0.1)
    res = CalibResult(EulerZYX(*theta, lower=tuple(lo), upper=tuple(hi)), R, ToolOffset(np.zeros(3)),
                      np.array([t_xy[0], t_xy[1], 0.0]), np.zeros(3), {}, {}, True,
                      "jacobian_regression")
    res.diagnostics["G"] = G.tolist()
    res.diagnostics.update(metrics_report(log_, res, camera=cam, G=G, offset=offset))
    return G, res


# ---------------------------------------------------------------- metrics

def trimmed_stats(err, trim=0.10):
    err = np.sort(np.asarray(err, dtype=float))
    keep = err[: max(1, int(np.ceil(len(err) * (1.0 - trim))))] if len(err) else err
    return float(keep.mean()), float(keep.std())


def pearson_velocity(obs_v, pred_v):
    a = np.asarray(obs_v, float).reshape(-1)
    b = np.asarray(pred_v, float).reshape(-1)
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def predict_pixels(result, log_, camera, G=None, offset=None):
    """Reprojected tip pixels for every frame of ``log_`` under ``result``."""
    if G is not None:
        return log_.tip3d @ np.asarray(G).T + offset
    Ree = log_.rotations()
    p3d = np.einsum("nij,j->ni", Ree, result.r_tip.r_tip) + log_.translations()
    if result.projection == "perspective":
        return project_perspective(camera, result.R, result.t_vec, p3d)
    return project_weak(camera, result.R, result.t_vec, p3d)


def metrics_report(log_, result, camera, window=30, trim=0.10, G=None, offset=None):
    """Reprojection, Chamfer, asynchrony, windowed ChamferMax and velocity Pearson.

    ``reproj_*`` pairs each prediction with the observation recorded at the
    same index; ``truth_reproj_*`` compares against the synchronized true
    pixels when the log carries them (synthetic worlds).
    """
    valid = np.asarray(log_.valid, bool)
    P = predict_pixels(result, log_, camera, G, offset)
    Q = log_.px[valid]
    paired = np.linalg.norm(P[valid] - Q, axis=1)
    rep_mean, rep_std = trimmed_stats(paired, trim)
    ch = chamfer_bidirectional(P, Q)
    cmax = 0.0
    n = len(log_)
    for s in range(0, max(n - window + 1, 1), max(window // 2, 1)):
        sl = slice(s, min(s + window, n))
        v = valid[sl]
        if v.sum() >= 1:
            cmax = max(cmax, chamfer_bidirectional(P[sl], log_.px[sl][v]))
    i, j = _valid_pairs(valid)
    pr = pearson_velocity(log_.px[j] - log_.px[i], P[j] - P[i]) if len(i) else 0.0
    out = {"reproj_mean": rep_mean, "reproj_std": rep_std, "chamfer_mean": float(ch),
           "asynchrony": float(rep_mean - ch), "chamfer_max": float(cmax), "pearson": pr}
    if np.all(np.isfinite(log_.px_true)):
        tr_mean, tr_std = trimmed_stats(np.linalg.norm(P - log_.px_true, axis=1), trim)
        out.update(truth_reproj_mean=tr_mean, truth_reproj_std=tr_std)
    return out


# ---------------------------------------------------------------- estimator API

class HandEyeCalibrator(BaseEstimator):
    """Estimator wrapper: ``fit(log)`` calibrates, ``predict(log)`` reprojects.

    ``method`` selects the proposed set-matching objective (``'bichamfer'``),
    the index-paired ``'euclidean'`` baseline, the ``'jacobian_regression'``
    baseline or the ``'pnp_stub'`` perspective baseline.
    """

    def __init__(self, camera=None, method="bichamfer", lambda_vel=DEFAULT_LAMBDA_VEL,
                 kappa=DEFAULT_KAPPA, a_t=1e-3, tilt_bound=DEFAULT_TILT, var_cap=DEFAULT_VAR_CAP,
                 n_starts=4, seed=0, freeze_tilt=False, tilt_values=(0.0, 0.0)):
        self.camera = camera
        self.method = method
        self.lambda_vel = lambda_vel
        self.kappa = kappa
        self.a_t = a_t
        self.tilt_bound = tilt_bound
        self.var_cap = var_cap
        self.n_starts = n_starts
        self.seed = seed
        self.freeze_tilt = freeze_tilt
        self.tilt_values = tilt_values

    def _problem(self, X):
        lo, hi = _bounds(self.tilt_bound)
        return CalibProblem(X, self.camera, self.lambda_vel, self.kappa, self.a_t, lo, hi,
                            self.var_cap, self.n_starts, self.seed,
                            freeze_tilt=self.freeze_tilt, tilt_values=tuple(self.tilt_values))

    def fit(self, X, y=None):
        if self.camera is None:
            raise ValueError("camera is required")
        t0 = time.perf_counter()
        self.G_ = self.offset_ = None
        if self.method == "bichamfer":
            self.result_ = calibrate(self._problem(X))
        elif self.method == "euclidean":
            self.result_ = solve(self._problem(X), "euclidean", "weak", "euclidean")
        elif self.method == "pnp_stub":
            self.result_ = solve(self._problem(X), "euclidean", "perspective", "pnp_stub_index_paired")
        elif self.method == "jacobian_regression":
            self.G_, self.result_ = baseline_jacobian_regression(X, self.camera)
            valid = np.asarray(X.valid, bool)
            self.offset_ = (X.px[valid] - X.tip3d[valid] @ self.G_.T).mean(axis=0)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.R_ = self.result_.R
        self.fit_seconds_ = time.perf_counter() - t0
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return predict_pixels(self.result_, X, self.camera, self.G_, self.offset_)

    def report(self, X):
        check_is_fitted(self, "result_")
        return metrics_report(X, self.result_, self.camera, G=self.G_, offset=self.offset_)

    def score(self, X, y=None):
        """Negative bidirectional Chamfer between reprojection and observations."""
        P = self.predict(X)
        return -chamfer_bidirectional(P, X.px[np.asarray(X.valid, bool)])

    def rotation_error_deg(self, R_true):
        check_is_fitted(self, "result_")
        return np.degrees(rotation_angle(self.R_, R_true))
