"""Closed-loop simulation, scripted operator and the experiment suite."""

from dataclasses import dataclass, field, asdict
import csv
import io
import json
import math

import numpy as np
from scipy.spatial.transform import Rotation

from . import calibration as cal
from .controller import (DEPTH, LATERAL, AdmittanceParams, CartesianGantry, HillClimbParams,
                         MacroQPParams, MicroGains, PhaseState, admittance_step, deadzone,
                         fuse_commands, hillclimb_depth_step, macro_qp, micro_step, sat_norm)
from .estimator import (FusionParams, Peak, SoftGatedTipTracker, H_X, conformal_calibrate,
                        extract_peaks, gated_update, nonconformity, predict, select_candidate,
                        covariance_trace_bound, process_noise, transition)
from .geometry import ConfigurationError, rotation_angle
from .labeling import gaussian_heatmap
from .scenario import (CorruptionSpec, Rig, TrajectorySpec, generate_trajectory, observe,
                       s_pattern_targets, sharpness_profile, spec_from_dict)

EXPERIMENTS = ("calib_ablation", "tracking_ablation", "reach9", "circle", "center_edge_center",
               "depth_regulation", "coverage_check")
DT = 0.0333


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------- operator

@dataclass
class OperatorParams:
    stiffness: float = 0.5   # N / mm
    damping: float = 0.05    # N s / mm
    force_cap: float = 5.0   # N
    margin_px: float = 20.0


def scripted_operator(tip_robot, tip_vel, fov_center_robot, in_fov, schedule, params=None):
    """Virtual hand: push toward the field of view, then click the next target.

    ``schedule`` is a callable returning the pending click (or ``None``).
    Returns ``(force N, click)``.
    """
    p = params or OperatorParams()
    if in_fov:
        return np.zeros(3), schedule()
    f = p.stiffness * (np.asarray(fov_center_robot, float) - np.asarray(tip_robot, float))
    f = f - p.damping * np.asarray(tip_vel, float)
    return sat_norm(f, p.force_cap), None


# ---------------------------------------------------------------- experiment definition

@dataclass
class Experiment:
    name: str
    rig: Rig = None
    trajectory: TrajectorySpec = None
    corruption: CorruptionSpec = field(default_factory=lambda: CorruptionSpec(pixel_noise_sigma=0.5,
                                                                              depth_noise_sigma=0.002))
    calibration: str = "proposed"        # proposed | corrupted | truth
    corrupt_deg: float = 15.0
    corrupt_axis: tuple = (1.0, 1.0, 1.0)  # camera-frame axis of the injected error
    gains: MicroGains = field(default_factory=lambda: MicroGains(dt=DT))
    admittance: AdmittanceParams = field(default_factory=AdmittanceParams)
    qp: MacroQPParams = field(default_factory=MacroQPParams)
    operator: OperatorParams = field(default_factory=OperatorParams)
    tracker: dict = field(default_factory=dict)
    seed: int = 0
    repeats: int = 1
    latency: int = 0
    tol_px: float = 10.0
    hold_frames: int = 10
    target_timeout: float = 10.0
    n_crops: int = 5
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rig is None:
            self.rig = Rig.default() if self.name in ("center_edge_center", "calib_ablation",
                                                      "tracking_ablation", "coverage_check",
                                                      "depth_regulation") else Rig.wide_field()

    def validate(self):
        if self.name not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.name!r}")
        if self.calibration not in ("proposed", "corrupted", "truth"):
            raise ConfigurationError(f"unknown calibration mode {self.calibration!r}")
        if self.repeats < 1 or self.latency < 0 or self.hold_frames < 1 or self.n_crops < 2:
            raise ConfigurationError("repeats/hold/crops must be positive and latency >= 0")
        try:
            self.corruption.validate()
            self.admittance.validate()
            self.qp.validate()
            if self.trajectory is not None:
                self.trajectory.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self


def corrupted_rotation(R, deg, axis):
    ax = np.asarray(axis, float)
    ax = ax / np.linalg.norm(ax)
    return Rotation.from_rotvec(np.deg2rad(deg) * ax).as_matrix() @ R


_CALIB_CACHE = {}


def proposed_rotation(rig, seed):
    """Run the markerless calibration on a simulated warm-up of ``rig``."""
    key = (json.dumps(rig.to_dict(), sort_keys=True), int(seed))
    if key not in _CALIB_CACHE:
        spec = TrajectorySpec(kind="warmup", duration=500 / 30.0)
        poses = generate_trajectory(spec, rig, seed=seed)
        lg = observe(rig, poses, CorruptionSpec(pixel_noise_sigma=1.0, jitter_frames_max=3), seed=seed)
        est = cal.HandEyeCalibrator(rig.camera, method="bichamfer", seed=seed).fit(lg)
        _CALIB_CACHE[key] = est.R_.copy()
    return _CALIB_CACHE[key]


def estimated_rotation(exp, seed):
    if exp.calibration == "truth":
        return exp.rig.R.copy()
    if exp.calibration == "corrupted":
        return corrupted_rotation(exp.rig.R, exp.corrupt_deg, exp.corrupt_axis)
    return proposed_rotation(exp.rig, seed)


# ---------------------------------------------------------------- the closed loop

class World:
    """Kinematic gantry carrying the tool under the microscope."""

    def __init__(self, rig, q0):
        self.rig = rig
        self.robot = CartesianGantry(rig.home_rotation)
        self.q = np.asarray(q0, float).copy()
        self.qdot = np.zeros(3)

    def tip_robot(self):
        return self.q + self.rig.home_rotation @ self.rig.tool.r_tip

    def tip_camera(self):
        return self.rig.R @ self.tip_robot() + self.rig.t_vec

    def tip_pixel(self):
        return self.rig.camera.principal_point + self.rig.camera.scale * self.tip_camera()[:2]

    def e_z(self):
        return float(self.tip_camera()[2] - self.rig.z_star)

    def integrate(self, qdot, dt):
        self.qdot = np.asarray(qdot, float)
        self.q = self.q + self.qdot * dt


def _q_for_pixel(rig, px, depth_offset=0.0):
    p_cam = np.array([*((np.asarray(px, float) - rig.camera.principal_point) / rig.camera.scale),
                      rig.z_star + depth_offset])
    return rig.pose_for_tip_camera(p_cam).translation


class _Observer:
    def __init__(self, rig, cor, rng, latency):
        self.rig, self.cor, self.rng = rig, cor, rng
        self.buf = []
        self.latency = latency
        self.drop_left = 0

    def __call__(self, px_true, ez_true):
        self.buf.append((px_true.copy(), ez_true))
        px_true, ez_true = self.buf[max(0, len(self.buf) - 1 - self.latency)]
        cor, rng, rig = self.cor, self.rng, self.rig
        noise = rng.normal(0.0, 1.0, size=2)
        depth_noise = rng.normal(0.0, 1.0, size=256)
        u_out, u_drop, u_conf = rng.random(3)
        if self.drop_left > 0 or (cor.dropout_rate > 0 and u_drop < cor.dropout_rate):
            if self.drop_left == 0:
                self.drop_left = int(rng.integers(1, cor.dropout_burst_max + 1))
            self.drop_left -= 1
            return None
        if not rig.camera.inside(px_true):
            return None
        px = px_true + cor.pixel_noise_sigma * noise
        outlier = cor.outlier_rate > 0 and u_out < cor.outlier_rate
        if outlier:
            a = 2 * math.pi * u_conf
            px = px + cor.outlier_magnitude * np.array([math.cos(a), math.sin(a)])
        m = cor.confidence_degraded if outlier else cor.confidence_clean
        if cor.defocus_confidence:
            f = (sharpness_profile(rig, rig.z_star + ez_true) - rig.sharp_floor) / (rig.sharp_peak - rig.sharp_floor)
            m *= f
        conf = float(np.clip(m, 0.0, 1.0))
        return {"px": px, "conf": conf, "ez": ez_true, "depth_noise": depth_noise}


def _tracker(exp):
    kw = dict(dt=exp.gains.dt)
    kw.update(exp.tracker)
    return SoftGatedTipTracker(**kw)


def run_loop(exp, seed, targets, target_fn=None, start_px=None, start_depth=0.0, duration=None,
             R_hat=None, advance_on_hold=True, target_rate_fn=None):
    """Fixed-step closed loop; returns a RunLog dict.

    ``targets`` are pixel clicks visited in order (advanced after the hold
    criterion); ``target_fn(t)`` instead gives a moving target.
    """
    rig, g = exp.rig, exp.gains
    dt = g.dt
    rng = np.random.default_rng(seed)
    R_hat = estimated_rotation(exp, seed) if R_hat is None else R_hat
    cam = rig.camera
    start_px = cam.principal_point if start_px is None else start_px
    world = World(rig, _q_for_pixel(rig, start_px, start_depth))
    obs = _Observer(rig, exp.corruption, rng, exp.latency)
    tracker = _tracker(exp).reset()
    fov_center = rig.pose_for_tip_camera(np.array([0.0, 0.0, rig.z_star])).translation \
        + rig.home_rotation @ rig.tool.r_tip
    phase = PhaseState(z_ref=float((R_hat @ world.q)[2]))
    v_adm = np.zeros(3)
    qdot_prev = np.zeros(3)
    queue = list(np.asarray(targets, float)) if targets is not None else []
    target = None
    last_target = None
    u_axial_prev = 0.0
    click_t = None
    hold = 0
    results = []
    steps = []
    n_steps = int(round((duration if duration is not None else exp.target_timeout * max(len(queue), 1)) / dt))

    def schedule():
        return queue[0] if (target is None and queue) else None

    for k in range(n_steps):
        t = k * dt
        px_true = world.tip_pixel()
        ez_true = world.e_z()
        in_fov = cam.inside(px_true, exp.operator.margin_px)
        force, click = scripted_operator(world.tip_robot(), world.qdot, fov_center, in_fov, schedule,
                                         exp.operator)
        events = []
        if target_fn is not None:
            new_target = np.asarray(target_fn(t), float)
            if target is None:
                click_t = t
            elif tracker.state_.init_x:
                tracker.retarget(target, new_target)
            target = new_target
        elif click is not None:
            queue.pop(0)
            if last_target is not None and tracker.state_.init_x:
                tracker.retarget(last_target, click)
            target, click_t, hold = np.asarray(click, float), t, 0
            events.append("click")
        if target is not None:
            last_target = target

        o = obs(px_true, ez_true)
        u_px = cam.scale * (R_hat @ qdot_prev)[:2]
        u_z = float((R_hat @ qdot_prev)[2])
        rec = {"t": t, "target": last_target if last_target is not None else cam.principal_point,
               "u_px": u_px, "u_z": u_z}
        if o is not None:
            rec.update(px=o["px"], conf=o["conf"],
                       depth_crops=o["ez"] + exp.corruption.depth_noise_sigma * o["depth_noise"][:exp.n_crops])
        else:
            events.append("dropout")
        snap = tracker.feed(rec)
        events.extend(snap["events"])

        f_t = deadzone(force, exp.admittance.delta)
        v_adm, dp = admittance_step(v_adm, f_t, exp.admittance)
        qdot_macro, qinfo = macro_qp(np.eye(3), world.robot.jacobian(world.q), dp, world.q, exp.qp)

        u_micro = np.zeros(3)
        st = tracker.state_
        vis = bool(st.init_x) and target is not None
        axial = float((R_hat @ world.q)[2])
        # fixture rate: axial motion the fixture itself did not command
        e_reg = (axial - phase.z_ref, float((R_hat @ qdot_prev)[2]) - u_axial_prev)
        ex = np.asarray(st.ex)
        ez_hat = st.ez if st.init_z else np.zeros(2)
        # a moving target's known rate enters as feedforward through the rate term
        v_ff = np.zeros(2)
        if target_fn is not None and target_rate_fn is not None:
            v_ff = np.asarray(target_rate_fn(t), float) / cam.scale
        u_x, u_z_cmd, phase = micro_step(ex[:2] / cam.scale, ex[2:] / cam.scale - v_ff, ez_hat, phase,
                                         vis, g, e_reg, axial)
        u_micro = R_hat.T @ np.array([u_x[0], u_x[1], u_z_cmd])
        u_axial_prev = float((R_hat @ fuse_commands(np.zeros(3), u_micro, np.eye(3), g.W_q, g.lam))[2])
        qdot = fuse_commands(qdot_macro, u_micro, np.eye(3), g.W_q, g.lam)
        if not np.all(np.isfinite(qdot)) or not np.all(np.isfinite(ex)):
            raise SimulationError(f"non-finite state at step {k}")

        err_px = float(np.linalg.norm(px_true - target)) if target is not None else float("nan")
        steps.append({"k": k, "t": round(t, 6), "tip": world.tip_camera().tolist(), "px": px_true.tolist(),
                      "ez": ez_true, "target": None if target is None else target.tolist(),
                      "err_px": err_px, "ex": ex.tolist(), "ez_hat": list(map(float, ez_hat)),
                      "gx": snap["gx"], "gz": snap["gz"], "phase": phase.phase,
                      "u": [float(u_x[0]), float(u_x[1]), float(u_z_cmd)],
                      "force": force.tolist(), "qp_scaled": qinfo["scaled"], "events": events})

        if target is not None and target_fn is None:
            hold = hold + 1 if err_px <= exp.tol_px else 0
            timed_out = t - click_t >= exp.target_timeout
            if hold >= exp.hold_frames or timed_out:
                ok = hold >= exp.hold_frames
                results.append({"target": target.tolist(), "success": ok,
                                "time": (t - click_t - (exp.hold_frames - 1) * dt) if ok else float("nan")})
                if advance_on_hold:
                    target, hold = None, 0
                if not queue and advance_on_hold:
                    world.integrate(qdot, dt)
                    qdot_prev = qdot
                    break
        world.integrate(qdot, dt)
        qdot_prev = qdot
    return {"steps": steps, "targets": results, "R_hat_error_deg": float(np.degrees(rotation_angle(R_hat, rig.R)))}


# ---------------------------------------------------------------- experiments

def _summary_reach(log):
    tr = log["targets"]
    ok = [r["success"] for r in tr]
    times = [r["time"] for r in tr if r["success"]]
    return {"n_targets": len(tr), "successes": int(sum(ok)), "success": bool(tr) and all(ok),
            "mean_time_s": float(np.mean(times)) if times else float("nan")}


def run_reach9(exp, seed):
    targets = s_pattern_targets(exp.rig.camera, exp.options.get("fraction", 0.7))
    log = run_loop(exp, seed, targets)
    log["summary"] = _summary_reach(log)
    if len(log["targets"]) < len(targets):
        log["summary"]["success"] = False
    return log


def circle_target(cam, radius_px, rate_deg_s):
    c = cam.principal_point
    w = np.deg2rad(rate_deg_s)
    return lambda t: c + radius_px * np.array([math.cos(w * t), math.sin(w * t)])


def circle_rate(radius_px, rate_deg_s):
    w = np.deg2rad(rate_deg_s)
    return lambda t: radius_px * w * np.array([-math.sin(w * t), math.cos(w * t)])


def run_circle(exp, seed):
    traj = exp.trajectory or TrajectorySpec(kind="circle")
    fn = circle_target(exp.rig.camera, traj.radius_px, traj.rate_deg_s)
    rate = circle_rate(traj.radius_px, traj.rate_deg_s) if exp.options.get("feedforward", True) else None
    duration = exp.options.get("duration", 360.0 / traj.rate_deg_s)
    log = run_loop(exp, seed, None, target_fn=fn, start_px=fn(0.0), duration=duration, target_rate_fn=rate)
    settle = exp.options.get("settle_s", 1.0)
    c = exp.rig.camera.principal_point
    rad = [abs(np.linalg.norm(np.asarray(s["px"]) - c) - traj.radius_px)
           for s in log["steps"] if s["t"] >= settle]
    trk = [s["err_px"] for s in log["steps"] if s["t"] >= settle]
    log["summary"] = {"radial_error_px": float(np.mean(rad)), "radial_error_max_px": float(np.max(rad)),
                      "tracking_error_px": float(np.mean(trk))}
    return log


def run_center_edge_center(exp, seed):
    cam = exp.rig.camera
    c = cam.principal_point
    frac = exp.options.get("edge_fraction", 0.85)
    W, H = cam.image_size
    side = exp.options.get("side", "right")
    d = {"right": (1, 0), "left": (-1, 0), "top": (0, -1), "bottom": (0, 1)}[side]
    edge = c + frac * np.array([d[0] * (W / 2 - 1), d[1] * (H / 2 - 1)])
    log = run_loop(exp, seed, [edge, c])
    lat = [abs(s["ez"]) for s in log["steps"] if s["phase"] == LATERAL]
    log["summary"] = dict(_summary_reach(log), max_abs_ez_lateral_mm=float(max(lat)) if lat else 0.0,
                          depth_steps=int(sum(s["phase"] == DEPTH for s in log["steps"])))
    return log


def fov_entry_time(distance_mm=30.0, exp=None, max_time=30.0):
    """Time for the scripted operator to bring the tip into view from afar."""
    exp = exp or Experiment("reach9")
    rig = exp.rig
    world = World(rig, _q_for_pixel(rig, rig.camera.principal_point) + np.array([distance_mm, 0.0, 0.0]))
    fov_center = world.tip_robot() - np.array([distance_mm, 0.0, 0.0])
    v = np.zeros(3)
    dt = exp.admittance.dt
    max_force = 0.0
    for k in range(int(max_time / dt)):
        in_fov = rig.camera.inside(world.tip_pixel(), exp.operator.margin_px)
        if in_fov:
            return k * dt, max_force
        f, _ = scripted_operator(world.tip_robot(), world.qdot, fov_center, False, lambda: None, exp.operator)
        max_force = max(max_force, float(np.linalg.norm(f)))
        v, dp = admittance_step(v, deadzone(f, exp.admittance.delta), exp.admittance)
        qd, _ = macro_qp(np.eye(3), world.robot.jacobian(world.q), dp, world.q, exp.qp)
        world.integrate(qd, dt)
    return float("inf"), max_force


# ------------------------------------------------ depth regulation

def depth_direct_steps(rig, z0, seed, gains=None, crops=5, depth_sigma=0.002, max_steps=900):
    """Frames until the e_z micro law settles (3 in-band measurements)."""
    g = gains or MicroGains(dt=DT)
    rng = np.random.default_rng(seed)
    tracker = SoftGatedTipTracker(dt=g.dt).reset()
    z = float(z0)
    u_prev = 0.0
    inband = 0
    for k in range(max_steps):
        ez = z - rig.z_star
        snap = tracker.feed({"t": k * g.dt, "u_z": u_prev,
                             "depth_crops": ez + depth_sigma * rng.normal(size=crops)})
        st = tracker.state_
        inband = inband + 1 if abs(ez) <= g.delta_z else 0
        if inband >= g.settle_count:
            return k + 1
        u = -float(g.K_z @ st.ez) if st.init_z else 0.0
        u = float(np.clip(u, -g.v_z_max, g.v_z_max))
        z += u * g.dt
        u_prev = u
    return None


def depth_hillclimb_steps(rig, z0, seed, params=None, sharp_sigma=0.002, max_steps=900, v_z_max=5.0):
    """Frames until the sharpness hill-climb settles; each update spends two probe frames."""
    p = params or HillClimbParams(max_step=v_z_max * DT)
    rng = np.random.default_rng(seed)
    z = float(z0)
    z_prior = z
    frames = 0
    inband = 0

    def measure(zz):
        return sharpness_profile(rig, zz) + sharp_sigma * rng.normal()

    while frames < max_steps:
        probes = {}

        def fn(zz):
            probes[zz] = measure(zz)
            return probes[zz]

        z, _ = hillclimb_depth_step(z, fn, z_prior, p)
        for _ in range(3):  # +h probe, -h probe, move
            frames += 1
        inband = inband + 1 if abs(z - rig.z_star) <= 0.03 else 0
        if inband >= 3:
            return frames
    return None


def run_depth_regulation(exp, seed):
    rig = exp.rig
    offsets = exp.options.get("offsets", [1.0, 1.5, 2.0, 2.5, 2.8])
    trials = exp.options.get("trials", 7)
    rows = []
    rng = np.random.default_rng(seed)
    for off in offsets:
        for tr in range(trials):
            sgn = 1.0 if rng.random() < 0.5 else -1.0
            z0 = rig.z_star + sgn * off
            s = seed * 1000 + tr
            rows.append({"offset_mm": off, "sign": sgn, "trial": tr,
                         "direct_steps": depth_direct_steps(rig, z0, s, exp.gains),
                         "hillclimb_steps": depth_hillclimb_steps(rig, z0, s)})
    far = exp.options.get("far_offset", 4.0)
    far_rows = [{"offset_mm": far, "trial": tr,
                 "direct_steps": depth_direct_steps(rig, rig.z_star + far, seed * 1000 + 500 + tr, exp.gains),
                 "hillclimb_steps": depth_hillclimb_steps(rig, rig.z_star + far, seed * 1000 + 500 + tr)}
                for tr in range(trials)]
    paired = [r for r in rows if r["direct_steps"] is not None]
    wins = sum(1 for r in paired if r["hillclimb_steps"] is None or r["direct_steps"] < r["hillclimb_steps"])
    return {"trials": rows, "far_trials": far_rows,
            "summary": {"direct_wins": wins, "n_trials": len(rows),
                        "far_hillclimb_failures": sum(r["hillclimb_steps"] is None for r in far_rows),
                        "far_direct_successes": sum(r["direct_steps"] is not None for r in far_rows),
                        "plateau_onset_mm": rig.plateau_onset}}


# ------------------------------------------------ estimator experiments

def stream_log(rig, seed, n_frames, cor):
    spec = TrajectorySpec(kind="warmup", duration=n_frames / 30.0)
    return observe(rig, generate_trajectory(spec, rig, seed=seed), cor, seed=seed)


def replay_scores(tracker, log_, target=None):
    """Innovation scores of a full-trust replay (the calibration statistic)."""
    p = tracker.gate_params(getattr(tracker, "q_", None))
    target = np.zeros(2) if target is None else np.asarray(target, float)
    R0 = p.sigma2_x0 * np.eye(2)
    ex = None
    P = None
    out = []
    prev = None
    from .estimator import FilterState
    st = FilterState()
    for i in range(len(log_)):
        t = float(log_.t[i])
        if prev is not None:
            st = predict(st, t - prev, p.q0x, p.q0z)
        prev = t
        if not log_.valid[i]:
            continue
        y = log_.px[i] - target
        if not st.init_x:
            st.ex = np.array([y[0], y[1], 0.0, 0.0])
            st.init_x = True
            continue
        out.append(nonconformity(y - H_X @ st.ex, H_X @ st.Px @ H_X.T + R0))
        st.ex, st.Px, _, _ = gated_update(st.ex, st.Px, y, H_X, R0, 1.0)
    return np.asarray(out)


def split_coverage(scores, level=0.95, block=250, burn=50):
    """Split-conformal check on one stream: even blocks calibrate, odd blocks test."""
    sc = np.asarray(scores, float)[burn:]
    blk = (np.arange(len(sc)) // block) % 2
    q = conformal_calibrate(sc[blk == 0], level)
    test = sc[blk == 1]
    return q, float(np.mean(test <= q)), int(len(test))


def run_coverage(exp, seed):
    rig = exp.rig
    n = exp.options.get("n_steps", 5000)
    tr = _tracker(exp)
    scores = replay_scores(tr, stream_log(rig, seed, 2 * n + 50, exp.corruption))
    q, c, m = split_coverage(scores, tr.level, exp.options.get("block", 250))
    return {"summary": {"q": q, "coverage": c, "n": m}}


def covariance_run(seed, n_steps=10_000, watchdog=True, permanent_dropout_after=None,
                   burst_max=None, dropout_rate=0.02, tracker_kw=None):
    """Trace(P) history of the tracker on a stream with dropout bursts."""
    tkw = dict(tracker_kw or {})
    tkw["watchdog"] = watchdog
    tr = SoftGatedTipTracker(**tkw).reset()
    p = tr.params_
    burst = p.n_max - 2 if burst_max is None else burst_max
    rng = np.random.default_rng(seed)
    pos = np.array([240.0, 180.0])
    traces, events = [], []
    drop_left = 0
    for k in range(n_steps):
        t = k * p.dt
        pos = pos + rng.normal(0, 0.5, size=2)
        rec = {"t": t}
        dropped = drop_left > 0 or rng.random() < dropout_rate
        if permanent_dropout_after is not None and k >= permanent_dropout_after:
            dropped = True
        elif dropped and drop_left == 0:
            drop_left = int(rng.integers(1, burst + 1))
        if drop_left > 0:
            drop_left -= 1
        if not dropped:
            rec.update(px=pos + rng.normal(0, 1.0, size=2), conf=float(np.clip(rng.beta(18, 2), 0, 1)))
        snap = tr.feed(rec)
        traces.append(snap["trPx"])
        events.append(snap["events"])
    return np.array(traces), events, p


def covariance_bound(params, trace_last=None):
    from .estimator import COLD_POS_VAR, COLD_VEL_VAR
    F = transition(params.dt, 2)
    Q = process_noise(params.dt, params.q0x, 2)
    tl = 2 * COLD_POS_VAR + 2 * COLD_VEL_VAR if trace_last is None else trace_last
    return covariance_trace_bound(F, Q, tl, params.n_max)


def synth_heatmap(size, peaks, sigma=3.0):
    W, H = size
    out = np.zeros((H, W))
    for p, a in peaks:
        out = np.maximum(out, a * gaussian_heatmap(p, sigma, (W, H)))
    return out


def attenuation_stream(seed, n=300, outlier_rate=0.1, magnitude=20.0, params=None, size=(160, 120)):
    """Raw-argmax versus fused-selection error on an outlier-injected stream."""
    fp = (params or FusionParams()).validate()
    rng = np.random.default_rng(seed)
    W, H = size
    c = np.array([W / 2, H / 2])
    hist = []
    raw_err, sel_err = [], []
    for k in range(n):
        true = c + np.array([30 * math.sin(2 * math.pi * k / 150), 20 * math.sin(2 * math.pi * k / 110)])
        det = true + rng.normal(0, 0.7, size=2)
        peaks = [(det, 0.8)]
        if rng.random() < outlier_rate:
            a = rng.uniform(0, 2 * math.pi)
            peaks = [(det, 0.55), (true + magnitude * np.array([math.cos(a), math.sin(a)]), 0.95)]
        Hm = synth_heatmap(size, peaks)
        ys, xs = np.unravel_index(np.argmax(Hm), Hm.shape)
        raw = np.array([xs, ys], float)
        cand = extract_peaks(Hm, fp, last_pos=hist[-1] if hist else None, cold=not hist)
        pred = hist[-1] + (hist[-1] - hist[-2]) if len(hist) >= 2 else None
        sel, _ = select_candidate(cand, hist, pred, fp)
        if sel is None:
            sel = raw
        hist.append(sel)
        hist = hist[-(fp.history + 1):]
        if k >= 20:
            raw_err.append(np.linalg.norm(raw - true))
            sel_err.append(np.linalg.norm(sel - true))
    return float(np.mean(raw_err)), float(np.mean(sel_err))


def run_tracking_ablation(exp, seed):
    raw, sel = attenuation_stream(seed, outlier_rate=exp.options.get("outlier_rate", 0.1),
                                  magnitude=exp.options.get("outlier_magnitude", 20.0))
    rig = exp.rig
    cor = CorruptionSpec(pixel_noise_sigma=1.0, outlier_rate=0.1, outlier_magnitude=20.0,
                         dropout_rate=0.02, dropout_burst_max=5)
    lg = stream_log(rig, seed, 600, cor)
    out = {"raw_mae": raw, "fused_mae": sel, "attenuation": sel / raw if raw > 0 else float("nan")}
    for name, kw in (("soft_gate", {}), ("soft_gate_tau1", {"tau_x": 1.0}), ("no_gate", {"tau_x": 1e-9})):
        tr = _tracker(exp).set_params(**kw) if kw else _tracker(exp)
        tr.fit(stream_log(rig, seed + 1, 600, CorruptionSpec(pixel_noise_sigma=1.0)))
        errs = []
        for i in range(len(lg)):
            rec = {"t": lg.t[i]}
            if lg.valid[i]:
                rec.update(px=lg.px[i], conf=lg.conf[i])
            snap = tr.feed(rec)
            if snap["init_x"] and i > 30:
                errs.append(np.linalg.norm(np.asarray(snap["ex"][:2]) - lg.px_true[i]))
        out[f"{name}_mae"] = float(np.mean(errs))
    return {"summary": out}


def run_calib_ablation(exp, seed, methods=("bichamfer", "euclidean", "jacobian_regression")):
    rig = exp.rig
    n = exp.options.get("frames", 500)
    cor = exp.options.get("calib_corruption") or CorruptionSpec(pixel_noise_sigma=1.0, jitter_frames_max=3)
    spec = TrajectorySpec(kind="warmup", duration=n / 30.0)
    lg = observe(rig, generate_trajectory(spec, rig, seed=seed), cor, seed=seed)
    ev = observe(rig, generate_trajectory(spec, rig, seed=seed + 100), CorruptionSpec(), seed=seed + 100)
    rows = {}
    for m in methods:
        est = cal.HandEyeCalibrator(rig.camera, method=m, seed=seed).fit(lg)
        rep = est.report(ev)
        ins = est.report(lg)
        rows[m] = {"rotation_error_deg": float(est.rotation_error_deg(rig.R)),
                   "reproj_px": rep["truth_reproj_mean"], "pearson": rep["pearson"],
                   "insample_reproj_px": ins["reproj_mean"], "chamfer_px": ins["chamfer_mean"],
                   "asynchrony_px": ins["asynchrony"], "chamfer_max_px": ins["chamfer_max"],
                   "fit_seconds": est.fit_seconds_}
    return {"summary": rows}


RUNNERS = {"reach9": run_reach9, "circle": run_circle, "center_edge_center": run_center_edge_center,
           "depth_regulation": run_depth_regulation, "coverage_check": run_coverage,
           "tracking_ablation": run_tracking_ablation, "calib_ablation": run_calib_ablation}


def run(exp):
    """All repetitions of an experiment; repetition ``i`` uses seed ``seed + i``."""
    exp.validate()
    return [dict(RUNNERS[exp.name](exp, exp.seed + i), seed=exp.seed + i) for i in range(exp.repeats)]


# ---------------------------------------------------------------- reporting

def _flatten(prefix, d, out):
    for k, v in d.items():
        if k in ("seed", "method"):
            continue
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            _flatten(key + ".", v, out)
        elif isinstance(v, (bool, np.bool_)):
            out[key] = float(v)
        elif isinstance(v, (int, float, np.integer, np.floating)) and v is not None:
            out[key] = float(v)
    return out


def report(logs, method_key="method"):
    """Per-method, per-metric mean/std/median/p95 of run summaries.

    ``logs`` are dicts carrying ``summary`` and optionally ``method``.
    Returns ``(rows, csv_text, json_text)``.
    """
    if not logs:
        raise ValueError("nothing to report")
    groups = {}
    for lg in logs:
        m = str(lg.get(method_key, "default"))
        groups.setdefault(m, []).append(_flatten("", lg.get("summary", lg), {}))
    rows = []
    for m in sorted(groups):
        keys = sorted(set().union(*[g.keys() for g in groups[m]]))
        for key in keys:
            v = np.array([g[key] for g in groups[m] if key in g], float)
            v = v[np.isfinite(v)]
            if len(v) == 0:
                stats = dict(mean=float("nan"), std=float("nan"), median=float("nan"), p95=float("nan"))
            else:
                stats = dict(mean=float(v.mean()), std=float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                             median=float(np.median(v)), p95=float(np.percentile(v, 95)))
            rows.append(dict(method=m, metric=key, n=int(len(v)), **stats))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "metric", "n", "mean", "std", "median", "p95"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows, buf.getvalue(), json.dumps(rows, sort_keys=True, indent=1)


def dumps_steps(log):
    """JSONL text of a run's per-step records (byte-stable)."""
    return "".join(json.dumps(s, sort_keys=True) + "\n" for s in log["steps"])


# ---------------------------------------------------------------- config

def experiment_from_config(cfg, name=None, seed=None, repeats=None):
    """Build an :class:`Experiment` from a JSON-style dict."""
    cfg = dict(cfg or {})
    name = name or cfg.pop("experiment", None) or cfg.get("name")
    cfg.pop("experiment", None)
    cfg.pop("name", None)
    if name not in EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {name!r}")
    kw = {}
    try:
        if "rig" in cfg:
            kw["rig"] = Rig.from_dict(cfg.pop("rig"))
        if "trajectory" in cfg:
            kw["trajectory"] = spec_from_dict(TrajectorySpec, cfg.pop("trajectory"))
        if "corruption" in cfg:
            kw["corruption"] = spec_from_dict(CorruptionSpec, cfg.pop("corruption"))
        if "gains" in cfg:
            gd = dict(cfg.pop("gains"))
            gd.setdefault("dt", DT)
            kw["gains"] = MicroGains(**gd)
        if "admittance" in cfg:
            ad = {k: (np.asarray(v, float) if isinstance(v, list) else v) for k, v in cfg.pop("admittance").items()}
            kw["admittance"] = AdmittanceParams(**ad)
        if "qp" in cfg:
            qd = {k: (np.asarray(v, float) if isinstance(v, list) else v) for k, v in cfg.pop("qp").items()}
            kw["qp"] = MacroQPParams(**qd)
        if "operator" in cfg:
            kw["operator"] = OperatorParams(**cfg.pop("operator"))
        for k in ("calibration", "corrupt_deg", "corrupt_axis", "tracker", "seed", "repeats", "latency",
                  "tol_px", "hold_frames", "target_timeout", "n_crops", "options"):
            if k in cfg:
                kw[k] = cfg.pop(k)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    if cfg:
        raise ConfigurationError(f"unknown config keys: {sorted(cfg)}")
    if seed is not None:
        kw["seed"] = int(seed)
    if repeats is not None:
        kw["repeats"] = int(repeats)
    return Experiment(name, **kw).validate()
