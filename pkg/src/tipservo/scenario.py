"""Synthetic microscope world: rig, trajectories, corrupted observations, masks."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.draw import line as draw_line

from .geometry import (CameraModel, GeometryError, Pose3, ToolOffset, euler_to_rotation,
                       project_weak, tip_world, to_camera)

DATASET_PIXEL_PITCH_MM = 0.009164
TRAJECTORY_KINDS = ("lateral_sweep", "axial_scan", "s_pattern_9", "circle",
                    "center_edge_center", "warmup")


@dataclass
class Rig:
    """Ground-truth world.

    ``R``/``t_vec`` map robot-base points into the camera frame.  The focal
    plane ``z_star`` is a camera-frame depth in mm.
    """

    R: np.ndarray
    t_vec: np.ndarray
    tool: ToolOffset
    camera: CameraModel
    z_star: float = 0.0
    depth_of_field: float = 0.5
    plateau_onset: float = 3.0
    sharp_peak: float = 1.0
    sharp_floor: float = 0.05
    home_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t_vec = np.asarray(self.t_vec, dtype=float)
        self.home_rotation = np.asarray(self.home_rotation, dtype=float)
        if self.depth_of_field <= 0 or self.plateau_onset <= 0:
            raise GeometryError("depth of field and plateau onset must be positive")

    @classmethod
    def default(cls, euler=(0.03, -0.02, 0.4), scale=None, image_size=(480, 360),
                r_tip=(15.0, 0.0, -15.0), z_star=0.0, **kw):
        """Rig whose home pose puts the tip at the image centre, in focus."""
        scale = 1.0 / DATASET_PIXEL_PITCH_MM if scale is None else scale
        cam = CameraModel.centered(scale, image_size)
        R = euler_to_rotation(np.asarray(euler, dtype=float))
        tool = ToolOffset(np.asarray(r_tip, dtype=float))
        p_home = tool.r_tip.copy()  # home end-effector pose is (I, 0)
        t_vec = np.array([0.0, 0.0, z_star]) - R @ p_home
        return cls(R, t_vec, tool, cam, z_star=z_star, **kw)

    @classmethod
    def wide_field(cls, **kw):
        """1920x1440 sensor at 4 um/px, the layout used for reach/circle runs."""
        kw.setdefault("scale", 250.0)
        kw.setdefault("image_size", (1920, 1440))
        return cls.default(**kw)

    def home_pose(self):
        return Pose3(self.home_rotation, np.zeros(3))

    def tip_camera(self, pose):
        return to_camera(self.R, self.t_vec, tip_world(pose, self.tool))

    def tip_pixel(self, pose):
        return project_weak(self.camera, self.R, self.t_vec, tip_world(pose, self.tool))

    def pose_for_tip_camera(self, p_cam, rotation=None):
        """End-effector pose placing the tip at camera-frame point ``p_cam``."""
        Ree = self.home_rotation if rotation is None else rotation
        p3d = self.R.T @ (np.asarray(p_cam, dtype=float) - self.t_vec)
        return Pose3(Ree, p3d - Ree @ self.tool.r_tip)

    def to_dict(self):
        return {"R": self.R.tolist(), "t_vec": self.t_vec.tolist(),
                "r_tip": self.tool.r_tip.tolist(), "camera": self.camera.to_dict(),
                "z_star": self.z_star, "depth_of_field": self.depth_of_field,
                "plateau_onset": self.plateau_onset, "sharp_peak": self.sharp_peak,
                "sharp_floor": self.sharp_floor, "home_rotation": self.home_rotation.tolist()}

    @classmethod
    def from_dict(cls, d):
        if "R" not in d:
            kind = d.get("preset", "default")
            args = {k: v for k, v in d.items() if k != "preset"}
            return cls.wide_field(**args) if kind == "wide_field" else cls.default(**args)
        return cls(np.asarray(d["R"]), np.asarray(d["t_vec"]), ToolOffset(np.asarray(d["r_tip"])),
                   CameraModel.from_dict(d["camera"]), d.get("z_star", 0.0),
                   d.get("depth_of_field", 0.5), d.get("plateau_onset", 3.0),
                   d.get("sharp_peak", 1.0), d.get("sharp_floor", 0.05),
                   np.asarray(d.get("home_rotation", np.eye(3))))


@dataclass
class TrajectorySpec:
    kind: str = "warmup"
    duration: float = 500 / 30.0
    sample_rate: float = 30.0
    amplitude: float = 1.2
    axial_amplitude: float = 0.8
    radius_px: float = 200.0
    rate_deg_s: float = 30.0
    period: float = 8.0

    def validate(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.sample_rate <= 0 or self.duration < 0 or self.amplitude < 0:
            raise ValueError("invalid trajectory timing or amplitude")
        return self


@dataclass
class CorruptionSpec:
    pixel_noise_sigma: float = 0.0
    jitter_frames_max: int = 0
    dropout_rate: float = 0.0
    dropout_burst_max: int = 1
    outlier_rate: float = 0.0
    outlier_magnitude: float = 0.0
    depth_noise_sigma: float = 0.0
    confidence_clean: float = 0.9
    confidence_degraded: float = 0.2
    scale_perturbation: float = 0.0
    sharpness_noise_sigma: float = 0.0
    defocus_confidence: bool = False
    confidence_concentration: float = 20.0

    def validate(self):
        for name in ("dropout_rate", "outlier_rate", "confidence_clean", "confidence_degraded"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.jitter_frames_max < 0 or self.dropout_burst_max < 1:
            raise ValueError("jitter must be >= 0 and burst length >= 1")
        if min(self.pixel_noise_sigma, self.depth_noise_sigma, self.outlier_magnitude,
               self.sharpness_noise_sigma) < 0:
            raise ValueError("noise levels must be non-negative")
        return self


@dataclass
class WarmupLog:
    """Per-frame paired robot/vision records stored column-wise.

    Missing observations are NaN; ``valid`` is False exactly where ``px`` is NaN.
    """

    t: np.ndarray
    poses: np.ndarray        # (N, 12) row-major rotation + translation
    tip3d: np.ndarray        # (N, 3)
    px_true: np.ndarray      # (N, 2), NaN when unknown
    px: np.ndarray           # (N, 2)
    conf: np.ndarray         # (N,)
    ez: np.ndarray           # (N,)
    sharp: np.ndarray        # (N,)
    valid: np.ndarray        # (N,) bool

    def __len__(self):
        return len(self.t)

    def pose(self, i):
        return Pose3.from_array12(self.poses[i])

    def rotations(self):
        return self.poses[:, :9].reshape(-1, 3, 3)

    def translations(self):
        return self.poses[:, 9:]

    def subset(self, idx):
        return WarmupLog(*(getattr(self, f)[idx] for f in _LOG_FIELDS))

    def to_records(self):
        out = []
        for i in range(len(self)):
            ok = bool(self.valid[i])
            out.append({
                "t": float(self.t[i]),
                "pose": self.poses[i].tolist(),
                "tip3d": self.tip3d[i].tolist(),
                "px": self.px[i].tolist() if ok else None,
                "conf": float(self.conf[i]) if ok else None,
                "ez": float(self.ez[i]) if ok else None,
                "sharp": float(self.sharp[i]) if ok else None,
                "valid": ok,
            })
        return out

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_records(cls, records, rig=None):
        n = len(records)
        nan2 = np.full((n, 2), np.nan)
        log = cls(np.array([r["t"] for r in records], dtype=float).reshape(n),
                  np.array([r["pose"] for r in records], dtype=float).reshape(n, 12),
                  np.array([r["tip3d"] for r in records], dtype=float).reshape(n, 3),
                  nan2.copy(), nan2.copy(), np.full(n, np.nan), np.full(n, np.nan),
                  np.full(n, np.nan), np.array([bool(r["valid"]) for r in records], dtype=bool))
        for i, r in enumerate(records):
            if r["valid"]:
                log.px[i] = r["px"]
                log.conf[i] = r["conf"]
                log.ez[i] = r["ez"] if r["ez"] is not None else np.nan
                log.sharp[i] = r["sharp"] if r["sharp"] is not None else np.nan
        if rig is not None and n:
            log.px_true = project_weak(rig.camera, rig.R, rig.t_vec, log.tip3d)
        if n > 1 and np.any(np.diff(log.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        return log

    @classmethod
    def read_jsonl(cls, path, rig=None):
        with open(path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(recs, rig)


_LOG_FIELDS = ("t", "poses", "tip3d", "px_true", "px", "conf", "ez", "sharp", "valid")


def _fov_half_extent_mm(cam, margin_px=10.0):
    W, H = cam.image_size
    return (min(cam.principal_point[0], W - 1 - cam.principal_point[0]) - margin_px) / cam.scale, \
           (min(cam.principal_point[1], H - 1 - cam.principal_point[1]) - margin_px) / cam.scale


def s_pattern_targets(cam, fraction=0.7):
    """Nine pixel targets on a 3x3 grid visited in boustrophedon order."""
    W, H = cam.image_size
    cx, cy = cam.principal_point
    xs = cx + fraction * (W / 2 - 1) * np.array([-1.0, 0.0, 1.0])
    ys = cy + fraction * (H / 2 - 1) * np.array([-1.0, 0.0, 1.0])
    out = []
    for r, y in enumerate(ys):
        row = xs if r % 2 == 0 else xs[::-1]
        out.extend((x, y) for x in row)
    return np.array(out)


def tip_camera_path(spec, rig, seed=0):
    """Camera-frame tip positions (N, 3) for a trajectory specification."""
    spec.validate()
    n = int(round(spec.duration * spec.sample_rate))
    if n <= 0:
        return np.zeros((0, 3))
    cam = rig.camera
    t = np.arange(n) / spec.sample_rate
    rng = np.random.default_rng(seed)
    hx, hy = _fov_half_extent_mm(cam)
    c0 = (cam.principal_point - cam.principal_point) / cam.scale  # optical centre, mm
    p = np.zeros((n, 3))
    p[:, 2] = rig.z_star
    A = spec.amplitude
    if spec.kind in ("lateral_sweep", "warmup"):
        ax, ay = min(A, hx), min(A * hy / max(hx, 1e-12), hy)
        if A > hx + 1e-12:
            raise GeometryError("sweep amplitude leaves the field of view")
        w = 2 * np.pi / spec.period
        ph = rng.uniform(0, 2 * np.pi, size=3)
        ratio = rng.uniform(1.3, 1.7)
        p[:, 0] = c0[0] + ax * np.sin(w * t + ph[0])
        p[:, 1] = c0[1] + ay * np.sin(ratio * w * t + ph[1])
        if spec.kind == "warmup":
            p[:, 2] += spec.axial_amplitude * np.sin(0.77 * w * t + ph[2])
    elif spec.kind == "axial_scan":
        p[:, 2] = rig.z_star + np.linspace(-A, A, n)
    elif spec.kind == "circle":
        r = spec.radius_px / cam.scale
        if r >= min(cam.image_size) / 2 / cam.scale:
            raise GeometryError("circle radius leaves the field of view")
        ang = np.deg2rad(spec.rate_deg_s) * t
        p[:, 0] = r * np.cos(ang)
        p[:, 1] = r * np.sin(ang)
    elif spec.kind == "s_pattern_9":
        targets = (s_pattern_targets(cam) - cam.principal_point) / cam.scale
        seg = np.minimum((t / spec.duration * 9).astype(int), 8)
        p[:, :2] = targets[seg]
    elif spec.kind == "center_edge_center":
        if A > hx + 1e-12:
            raise GeometryError("edge excursion leaves the field of view")
        u = t / max(spec.duration, 1e-12)
        p[:, 0] = A * np.sin(np.pi * u) ** 2
    return p


def generate_trajectory(spec, rig, seed=0, wobble_deg=0.0):
    """End-effector poses realizing the tip path of ``spec``.

    ``wobble_deg`` adds a slow orientation oscillation of the tool, which is
    what makes the tip offset observable to calibration.
    """
    path = tip_camera_path(spec, rig, seed)
    n = len(path)
    poses = []
    rng = np.random.default_rng(seed + 7919)
    ph = rng.uniform(0, 2 * np.pi, size=3)
    for i in range(n):
        Rw = rig.home_rotation
        if wobble_deg:
            a = np.deg2rad(wobble_deg) * np.sin(2 * np.pi * i / (spec.sample_rate * spec.period) * np.array([0.6, 0.9, 0.45]) + ph)
            Rw = euler_to_rotation(a) @ Rw
        poses.append(rig.pose_for_tip_camera(path[i], Rw))
    return poses


def sharpness_profile(rig, z):
    """Defocus sharpness of a tip at camera depth ``z`` (mm).

    A Gaussian bump of width ``2*depth_of_field`` around the focal plane that
    is shifted and rescaled so it flattens exactly at ``plateau_onset``.
    """
    z = np.asarray(z, dtype=float)
    w = 2.0 * rig.depth_of_field
    d = z - rig.z_star
    g = np.exp(-d**2 / (2 * w**2))
    gp = math.exp(-rig.plateau_onset**2 / (2 * w**2))
    shape = np.maximum(g - gp, 0.0) / (1.0 - gp)
    out = rig.sharp_floor + (rig.sharp_peak - rig.sharp_floor) * shape
    return float(out) if out.ndim == 0 else out


def _beta_draw(rng, mean, concentration):
    mean = float(np.clip(mean, 1e-3, 1 - 1e-3))
    return float(np.clip(rng.beta(mean * concentration, (1 - mean) * concentration), 0.0, 1.0))


def observe(rig, poses, corruption=None, seed=0, sample_rate=30.0, t0=0.0):
    """Turn a pose sequence into a (possibly corrupted) :class:`WarmupLog`."""
    cor = (corruption or CorruptionSpec()).validate()
    rng = np.random.default_rng(seed)
    n = len(poses)
    cam = rig.camera
    poses_arr = np.array([p.to_array12() for p in poses]).reshape(n, 12)
    tip3d = np.array([tip_world(p, rig.tool) for p in poses]).reshape(n, 3)
    p_cam = to_camera(rig.R, rig.t_vec, tip3d)
    px_true = project_weak(cam, rig.R, rig.t_vec, tip3d)

    k = cor.jitter_frames_max
    shift = rng.integers(-k, k + 1, size=n) if k > 0 else np.zeros(n, dtype=int)
    src = np.clip(np.arange(n) + shift, 0, max(n - 1, 0))
    c = cam.principal_point
    px = c + (1.0 + cor.scale_perturbation) * (px_true[src] - c)
    if cor.pixel_noise_sigma > 0:
        px = px + rng.normal(0.0, cor.pixel_noise_sigma, size=(n, 2))
    outlier = rng.random(n) < cor.outlier_rate if cor.outlier_rate > 0 else np.zeros(n, bool)
    if outlier.any():
        ang = rng.uniform(0, 2 * np.pi, size=outlier.sum())
        px[outlier] += cor.outlier_magnitude * np.column_stack([np.cos(ang), np.sin(ang)])

    valid = np.ones(n, dtype=bool)
    if cor.dropout_rate > 0:
        i = 0
        starts = rng.random(n) < cor.dropout_rate
        lengths = rng.integers(1, cor.dropout_burst_max + 1, size=n)
        while i < n:
            if starts[i]:
                valid[i:i + lengths[i]] = False
                i += lengths[i]
            else:
                i += 1
    near_drop = np.zeros(n, dtype=bool)
    near_drop[1:] |= ~valid[:-1]
    near_drop[:-1] |= ~valid[1:]

    ez = p_cam[src, 2] - rig.z_star
    if cor.depth_noise_sigma > 0:
        ez = ez + rng.normal(0.0, cor.depth_noise_sigma, size=n)
    sharp = np.atleast_1d(sharpness_profile(rig, p_cam[src, 2])).astype(float)
    if cor.sharpness_noise_sigma > 0:
        sharp = sharp + rng.normal(0.0, cor.sharpness_noise_sigma, size=n)

    conf = np.empty(n)
    focus = (np.atleast_1d(sharpness_profile(rig, p_cam[src, 2])) - rig.sharp_floor) / (rig.sharp_peak - rig.sharp_floor)
    for i in range(n):
        m = cor.confidence_degraded if (outlier[i] or near_drop[i]) else cor.confidence_clean
        if cor.defocus_confidence:
            m = m * float(focus[i])
        conf[i] = _beta_draw(rng, m, cor.confidence_concentration)

    px[~valid] = np.nan
    conf[~valid] = np.nan
    ez[~valid] = np.nan
    sharp[~valid] = np.nan
    t = t0 + np.arange(n) / sample_rate
    return WarmupLog(t, poses_arr, tip3d, px_true, px, conf, ez, sharp, valid)


def tool_direction_px(rig, pose):
    """Unit image direction from the tip back along the tool shaft."""
    d = rig.R @ (-(pose.rotation @ rig.tool.r_tip))
    v = d[:2]
    nv = np.linalg.norm(v)
    if nv < 1e-9:
        return np.array([1.0, 0.0])
    return v / nv


def _border_hit(p, d, W, H):
    ts = []
    for k, lim in ((0, W - 1), (1, H - 1)):
        if d[k] > 1e-12:
            ts.append((lim - p[k]) / d[k])
        elif d[k] < -1e-12:
            ts.append(-p[k] / d[k])
    t = min(ts)
    q = p + t * d
    return np.clip(np.rint(q), [0, 0], [W - 1, H - 1]).astype(int)


def render_mask(rig, pose, tool_width=1, direction=None):
    """Binary (H, W) mask of the tool shaft from an image border to the tip."""
    W, H = rig.camera.image_size
    tip_f = rig.tip_pixel(pose)
    tip = np.rint(tip_f).astype(int)
    m = max(1, int(tool_width))
    if not (m <= tip[0] <= W - 1 - m and m <= tip[1] <= H - 1 - m):
        raise GeometryError("tip outside the field of view")
    d = tool_direction_px(rig, pose) if direction is None else np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    entry = _border_hit(tip.astype(float), d, W, H)
    mask = np.zeros((H, W), dtype=bool)
    if tool_width <= 1:
        rr, cc = draw_line(tip[1], tip[0], entry[1], entry[0])
        mask[rr, cc] = True
        return mask
    half = tool_width / 2.0
    x0, x1 = sorted((tip[0], entry[0]))
    y0, y1 = sorted((tip[1], entry[1]))
    pad = int(math.ceil(half)) + 1
    xs = np.arange(max(0, x0 - pad), min(W, x1 + pad + 1))
    ys = np.arange(max(0, y0 - pad), min(H, y1 + pad + 1))
    X, Y = np.meshgrid(xs, ys)
    a = tip.astype(float)
    b = entry.astype(float)
    ab = b - a
    tt = np.clip(((X - a[0]) * ab[0] + (Y - a[1]) * ab[1]) / max(ab @ ab, 1e-12), 0.0, 1.0)
    # flat cap at the tip: drop pixels lying behind the tip along the shaft
    along = ((X - a[0]) * ab[0] + (Y - a[1]) * ab[1]) / max(np.linalg.norm(ab), 1e-12)
    dist = np.hypot(X - (a[0] + tt * ab[0]), Y - (a[1] + tt * ab[1]))
    band = (dist <= half) & (along >= -0.5)
    mask[np.ix_(ys, xs)] = band
    return mask


def render_patch(rig, z, size=32, seed=0):
    """Textured grayscale patch whose contrast follows the sharpness profile."""
    rng = np.random.default_rng(seed)
    tex = rng.random((size, size))
    return sharpness_profile(rig, z) * tex


def spec_from_dict(cls, d):
    names = {f for f in cls.__dataclass_fields__}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def spec_to_dict(obj):
    return asdict(obj)
