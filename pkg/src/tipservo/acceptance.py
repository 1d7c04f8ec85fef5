"""Acceptance checks shared by ``tipservo verify`` and the test-suite.

Each check returns a :class:`Check` with a pass flag and the measured
numbers; none of them raise on failure.
"""

from dataclasses import dataclass, field
import math
import time

import numpy as np

from . import harness as hz
from .calibration import chamfer_squared_mean, nn_distances, paired_squared_mean
from .controller import LegacyParams, dare_gain, legacy_rollout, riccati_residual
from .estimator import (FilterState, FusionParams, H_X, gated_update, predict, process_noise,
                        transition)
from .labeling import (LabelParams, focal_plane_label, is_one_pixel_wide, label_sequence,
                       normalize_depth, skeletonize)
from .scenario import (CorruptionSpec, Rig, TrajectorySpec, generate_trajectory, observe,
                       render_mask, sharpness_profile)


@dataclass
class Check:
    number: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d} {self.name}: {self._fmt()} ({self.seconds:.1f}s)"

    def _fmt(self):
        parts = []
        for k, v in self.detail.items():
            if isinstance(v, float):
                parts.append(f"{k}={v:.4g}")
            elif isinstance(v, (list, tuple)) and v and isinstance(v[0], float):
                parts.append(f"{k}=[" + ", ".join(f"{x:.3g}" for x in v) + "]")
            else:
                parts.append(f"{k}={v}")
        return " ".join(parts)


def _timed(number, name, fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return Check(number, name, bool(passed), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------- 1

def random_smooth_path(rng, n=200, center=(240.0, 180.0)):
    t = np.linspace(0.0, 1.0, n)
    P = np.zeros((n, 2))
    for k in range(1, 4):
        amp = rng.normal(0.0, 60.0 / k, size=2)
        ph = rng.uniform(0.0, 2 * np.pi, size=2)
        P += amp * np.sin(2 * np.pi * k * t[:, None] + ph)
    return P + np.asarray(center) + rng.normal(0.0, 40.0, size=2)


def squared_chamfer_trials(n_trials=100, seed=0):
    rng = np.random.default_rng(seed)
    c = np.array([240.0, 180.0])
    summed, directional = 0, 0
    worst = 0.0
    for _ in range(n_trials):
        P = random_smooth_path(rng, 200, c)
        dk = rng.uniform(-0.1, 0.1)
        Ph = c + (1.0 + dk) * (P - c)
        C = chamfer_squared_mean(P, Ph)
        D = paired_squared_mean(P, Ph)
        summed += C <= D
        worst = max(worst, C / D)
        fwd = float(np.mean(nn_distances(P, Ph) ** 2))
        bwd = float(np.mean(nn_distances(Ph, P) ** 2))
        directional += (fwd <= D + 1e-12) and (bwd <= D + 1e-12)
    return int(summed), int(directional), worst


def check_squared_chamfer():
    def fn():
        t0 = time.perf_counter()
        summed, directional, worst = squared_chamfer_trials()
        dt = time.perf_counter() - t0
        return summed == 100 and dt < 10.0, {"summed_form_holds": f"{summed}/100",
                                             "per_direction_holds": f"{directional}/100",
                                             "max_ratio": worst, "runtime_s": dt}
    return _timed(1, "squared Chamfer <= paired mean", fn)


# ---------------------------------------------------------------- 2, 3

def check_calibration_ordering(n_seeds=10):
    def fn():
        t0 = time.perf_counter()
        ok_err = ok_pear = 0
        rot = []
        for s in range(n_seeds):
            r = hz.run_calib_ablation(hz.Experiment("calib_ablation"), s)["summary"]
            b, e, j = r["bichamfer"], r["euclidean"], r["jacobian_regression"]
            rot.append(b["rotation_error_deg"])
            ok_err += (b["rotation_error_deg"] <= 2.0 and b["reproj_px"] < e["reproj_px"]
                       and b["reproj_px"] < j["reproj_px"])
            ok_pear += b["pearson"] >= e["pearson"] and b["pearson"] >= j["pearson"]
        dt = time.perf_counter() - t0
        return (ok_err >= 9 and ok_pear >= 9 and dt < 120.0,
                {"rot_and_reproj": f"{ok_err}/{n_seeds}", "pearson": f"{ok_pear}/{n_seeds}",
                 "max_rot_err_deg": max(rot), "runtime_s": dt})
    return _timed(2, "calibration ordering", fn)


def check_asynchrony(seeds=(0, 1, 2)):
    def fn():
        ratios, gaps = [], []
        for s in seeds:
            r = hz.run_calib_ablation(hz.Experiment("calib_ablation"), s, methods=("bichamfer",))
            b = r["summary"]["bichamfer"]
            ratios.append(b["asynchrony_px"] / b["chamfer_px"])
            exp0 = hz.Experiment("calib_ablation",
                                 options={"calib_corruption": CorruptionSpec(pixel_noise_sigma=1.0)})
            b0 = hz.run_calib_ablation(exp0, s, methods=("bichamfer",))["summary"]["bichamfer"]
            gaps.append(abs(b0["asynchrony_px"]))
        return (min(ratios) >= 2.0 and max(gaps) <= 0.5,
                {"async_over_chamfer_jitter3": [float(x) for x in ratios],
                 "abs_gap_jitter0_px": [float(x) for x in gaps]})
    return _timed(3, "asynchrony decomposition", fn)


# ---------------------------------------------------------------- 4

def reference_kf(x, P, y, H, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return x + K @ (y - H @ x), (np.eye(len(x)) - K @ H) @ P


def check_kf_equivalence(n=1000, seed=0):
    def fn():
        rng = np.random.default_rng(seed)
        dt, q0 = 1 / 30, 500.0
        F, Q = transition(dt, 2), process_noise(dt, q0, 2)
        R = 3.0 * np.eye(2)
        st = FilterState()
        st.ex = np.array([5.0, -3.0, 1.0, 0.0])
        st.Px = np.diag([10.0, 10.0, 50.0, 50.0])
        x, P = st.ex.copy(), st.Px.copy()
        worst = 0.0
        zero_exact = True
        for _ in range(n):
            st = predict(st, dt, q0, 1.0)
            x, P = F @ x, F @ P @ F.T + Q
            y = rng.normal(0.0, 2.0, size=2)
            pre_e, pre_P = st.ex.copy(), st.Px.copy()
            e0, P0, _, _ = gated_update(pre_e, pre_P, y, H_X, R, 0.0)
            zero_exact &= bool(np.array_equal(e0, pre_e) and np.array_equal(P0, pre_P))
            st.ex, st.Px, _, _ = gated_update(st.ex, st.Px, y, H_X, R, 1.0)
            x, P = reference_kf(x, P, y, H_X, R)
            worst = max(worst, np.max(np.abs(st.ex - x)) / max(1.0, np.max(np.abs(x))),
                        np.max(np.abs(st.Px - P)) / max(1.0, np.max(np.abs(P))))
        return worst <= 1e-9 and zero_exact, {"max_rel_err": float(worst), "g0_exact": zero_exact}
    return _timed(4, "gated KF equals reference KF", fn)


# ---------------------------------------------------------------- 5, 6, 7

def check_coverage(seeds=range(5)):
    def fn():
        cov = []
        for s in seeds:
            e = hz.Experiment("coverage_check", corruption=CorruptionSpec(pixel_noise_sigma=1.0))
            cov.append(hz.run_coverage(e, s)["summary"]["coverage"])
        return all(0.93 <= c <= 0.97 for c in cov), {"coverage": [float(c) for c in cov]}
    return _timed(5, "conformal coverage", fn)


def check_covariance_bound(seed=0):
    def fn():
        from .estimator import GateParams
        p = GateParams()
        # bursts up to the watchdog horizon, about 10 % of frames lost overall
        burst = p.n_max
        rate = 0.10 / ((burst + 1) / 2)
        tr, events, p = hz.covariance_run(seed, 10_000, True, None, burst, rate)
        bound = hz.covariance_bound(p)
        tr2, _, _ = hz.covariance_run(seed, 3000, False, 2000, burst, rate)
        over = np.flatnonzero(tr2[2000:] > bound)
        k = int(over[0]) + 1 if len(over) else None
        ok = tr.max() <= bound and k is not None and k <= 5 * p.n_max
        return ok, {"max_trace": float(tr.max()), "bound": float(bound),
                    "watchdog_resets": int(sum("reset_x" in e for e in events)),
                    "no_watchdog_exceeds_after": k, "limit": 5 * p.n_max}
    return _timed(6, "covariance bound and divergence contrast", fn)


def check_attenuation(seeds=range(5)):
    def fn():
        fp = FusionParams()
        rows = [hz.attenuation_stream(s, params=fp) for s in seeds]
        alpha = [sel / raw for raw, sel in rows]
        return fp.temporal_dominant and all(a < 1.0 for a in alpha), {"alpha": [float(a) for a in alpha]}
    return _timed(7, "temporal fusion attenuation", fn)


# ---------------------------------------------------------------- 8-11

def check_reach(seed=0):
    def fn():
        p = hz.run_reach9(hz.Experiment("reach9", calibration="proposed"), seed)["summary"]
        c = hz.run_reach9(hz.Experiment("reach9", calibration="corrupted"), seed)["summary"]
        ok_p = p["success"] and p["successes"] == 9 and p["mean_time_s"] <= 3.0
        slow = (not c["success"]) or c["mean_time_s"] >= 2.0 * p["mean_time_s"]
        return ok_p and slow, {"proposed_success": f"{p['successes']}/9", "proposed_time_s": p["mean_time_s"],
                               "corrupted_success": f"{c['successes']}/9", "corrupted_time_s": c["mean_time_s"]}
    return _timed(8, "reach ordering", fn)


def check_circle(seed=0):
    def fn():
        p = hz.run_circle(hz.Experiment("circle", calibration="proposed"), seed)["summary"]
        c = hz.run_circle(hz.Experiment("circle", calibration="corrupted"), seed)["summary"]
        ratio = c["radial_error_px"] / max(p["radial_error_px"], 1e-12)
        return ratio >= 5.0, {"proposed_px": p["radial_error_px"], "corrupted_px": c["radial_error_px"],
                              "ratio": ratio}
    return _timed(9, "circle tracking ordering", fn)


def check_depth_band(repeats=3):
    def fn():
        e = hz.Experiment("center_edge_center", repeats=repeats)
        logs = hz.run(e)
        worst = [lg["summary"]["max_abs_ez_lateral_mm"] for lg in logs]
        done = all(lg["summary"]["success"] for lg in logs)
        return max(worst) <= 0.03 and done, {"max_abs_ez_mm": [float(w) for w in worst], "routine_done": done}
    return _timed(10, "depth band in lateral phases", fn)


def check_depth_regulation(seed=0):
    def fn():
        e = hz.Experiment("depth_regulation")
        r = hz.run_depth_regulation(e, seed)
        s = r["summary"]
        onset_ok = e.rig.plateau_onset < 4.0
        ok = (s["direct_wins"] == s["n_trials"] and onset_ok
              and s["far_hillclimb_failures"] == len(r["far_trials"]))
        return ok, {"direct_fewer_steps": f"{s['direct_wins']}/{s['n_trials']}",
                    "hillclimb_fails_from_4mm": f"{s['far_hillclimb_failures']}/{len(r['far_trials'])}",
                    "plateau_onset_mm": s["plateau_onset_mm"]}
    return _timed(11, "depth regulation ordering", fn)


# ---------------------------------------------------------------- 12-14

def check_lyapunov(n_runs=10, seed=0):
    def fn():
        rig = Rig.default()
        J = rig.camera.L_img
        p = LegacyParams()
        rng = np.random.default_rng(seed)
        worst = -np.inf
        for _ in range(n_runs):
            _, V = legacy_rollout(rng.normal(0, 1.0, 3), rng.normal(0, 30.0, 2), rig.R, rig.R, J, p, 500)
            worst = max(worst, float(np.max(np.diff(V))))
        return worst <= 1e-9, {"max_dV": worst}
    return _timed(12, "Lyapunov descent", fn)


def check_labeling(n_frames=200, seed=1):
    def fn():
        rig = Rig.default()
        spec = TrajectorySpec(kind="lateral_sweep", duration=n_frames / 30.0, amplitude=1.5)
        poses = generate_trajectory(spec, rig, seed=seed)
        masks = [render_mask(rig, p, 1) for p in poses]
        labels = label_sequence(masks, LabelParams())
        hits = sum(lb.pixel is not None and np.array_equal(np.asarray(lb.pixel), np.rint(rig.tip_pixel(p)))
                   for lb, p in zip(labels, poses))
        thin = all(is_one_pixel_wide(skeletonize(m)) for m in masks)
        step = 0.05
        z = np.arange(-2.0, 2.0 + 1e-9, step) + rig.z_star + 0.013
        sharp = sharpness_profile(rig, z)
        recs = list(zip(z, sharp))
        lab = normalize_depth(recs, LabelParams(sharp_top_fraction=5.0))
        mu = float(z[0] - lab[0].z_corrected)
        depth_ok = abs(mu - rig.z_star) <= step
        return (hits == n_frames and thin and depth_ok,
                {"tip_accuracy": f"{hits}/{n_frames}", "width1": thin, "z_star_err_mm": abs(mu - rig.z_star)})
    return _timed(13, "labeling pipeline", fn)


def check_dare(n=50, seed=0):
    def fn():
        P, K = dare_gain(1.0, 1.0, 1.0, 1.0)
        golden = abs(P[0, 0] - (1 + math.sqrt(5)) / 2)
        rng = np.random.default_rng(seed)
        res, rho = [], []
        while len(res) < n:
            A = rng.normal(0, 1.0, (2, 2))
            B = rng.normal(0, 1.0, (2, 1))
            if np.linalg.matrix_rank(np.hstack([B, A @ B])) < 2:
                continue
            Q = np.eye(2)
            R = np.eye(1)
            Pr, Kr = dare_gain(A, B, Q, R)
            res.append(riccati_residual(A, B, Q, R, Pr) / max(1.0, np.max(np.abs(Pr))))
            rho.append(max(abs(np.linalg.eigvals(A - B @ Kr))))
        ok = golden <= 1e-9 and max(res) <= 1e-10 and max(rho) < 1.0
        return ok, {"golden_err": golden, "max_residual": float(max(res)), "max_rho": float(max(rho))}
    return _timed(14, "DARE synthesis", fn)


CHECKS = (check_squared_chamfer, check_calibration_ordering, check_asynchrony, check_kf_equivalence,
          check_coverage, check_covariance_bound, check_attenuation, check_reach, check_circle,
          check_depth_band, check_depth_regulation, check_lyapunov, check_labeling, check_dare)


def run_all(stream=None):
    out = []
    for fn in CHECKS:
        c = fn()
        out.append(c)
        if stream is not None:
            print(c.line(), file=stream, flush=True)
    return out
