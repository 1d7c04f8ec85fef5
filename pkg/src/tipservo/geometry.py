"""Rigid-body and camera math shared by the rest of the package.

Lengths are in millimetres, image coordinates in pixels (x to the right,
y downward), and rotations are stored as 3x3 matrices.  Euler angles only
appear where an optimizer needs a minimal parameterization.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

DEFAULT_SINGULARITY_MARGIN = 0.1
ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for out-of-domain geometric inputs."""


class ConfigurationError(ValueError):
    """Raised when a model is used without the fields it needs."""


def _vec(x, n, name):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise GeometryError(f"{name} must have {n} entries, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"{name} must be finite")
    return a


def check_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise GeometryError("rotation must be 3x3")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("matrix is not a proper rotation")
    return R


@dataclass(frozen=True)
class Pose3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _vec(self.translation, 3, "translation"))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def to_array12(self):
        """Row-major rotation followed by translation (log file layout)."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array12(cls, a):
        a = _vec(a, 12, "pose")
        return cls(a[:9].reshape(3, 3), a[9:])


@dataclass(frozen=True)
class EulerZYX:
    """Bounded angle triple; the rotation is Rz(theta_z) Ry(theta_y) Rx(theta_x)."""

    theta_x: float
    theta_y: float
    theta_z: float
    lower: tuple = (-np.pi, -(np.pi / 2 - DEFAULT_SINGULARITY_MARGIN), -np.pi)
    upper: tuple = (np.pi, np.pi / 2 - DEFAULT_SINGULARITY_MARGIN, np.pi)
    margin: float = DEFAULT_SINGULARITY_MARGIN

    def as_array(self):
        return np.array([self.theta_x, self.theta_y, self.theta_z], dtype=float)

    def validate(self):
        th = self.as_array()
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if not np.all(np.isfinite(th)):
            raise GeometryError("angles must be finite")
        if np.any(th < lo - 1e-12) or np.any(th > hi + 1e-12):
            raise GeometryError(f"angles {th} outside bounds [{lo}, {hi}]")
        if abs(self.theta_y) >= np.pi / 2 - self.margin:
            raise GeometryError("theta_y too close to the ZYX singularity")
        return th


@dataclass(frozen=True)
class ToolOffset:
    r_tip: np.ndarray
    max_length: float = 100.0

    def __post_init__(self):
        r = _vec(self.r_tip, 3, "r_tip")
        if np.linalg.norm(r) > self.max_length:
            raise GeometryError("tool offset exceeds the configured length bound")
        object.__setattr__(self, "r_tip", r)


@dataclass(frozen=True)
class CameraModel:
    """Weak-perspective camera with an optional fixed-plane pinhole variant.

    ``scale`` is in px/mm.  When ``focal`` and ``plane_depth`` are given they
    must satisfy focal / plane_depth == scale, so both projections agree.
    """

    scale: float
    principal_point: np.ndarray
    image_size: tuple
    focal: float | None = None
    plane_depth: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise GeometryError("scale must be positive")
        object.__setattr__(self, "principal_point", _vec(self.principal_point, 2, "principal_point"))
        W, H = (int(v) for v in self.image_size)
        if W <= 0 or H <= 0:
            raise GeometryError("image size must be positive")
        object.__setattr__(self, "image_size", (W, H))
        if (self.focal is None) != (self.plane_depth is None):
            raise ConfigurationError("focal and plane_depth must be given together")
        if self.focal is not None:
            if self.plane_depth <= 0:
                raise GeometryError("plane depth must be positive")
            if abs(self.focal / self.plane_depth - self.scale) > 1e-9 * self.scale:
                raise GeometryError("focal / plane_depth must equal scale")

    @classmethod
    def from_perspective(cls, focal, plane_depth, principal_point, image_size):
        return cls(focal / plane_depth, principal_point, image_size, focal, plane_depth)

    @classmethod
    def centered(cls, scale, image_size):
        W, H = image_size
        return cls(scale, np.array([W / 2.0, H / 2.0]), (W, H))

    @property
    def has_perspective(self):
        return self.focal is not None

    @property
    def L_img(self):
        s = self.scale
        return np.array([[s, 0.0, 0.0], [0.0, s, 0.0]])

    def inside(self, px, margin=0.0):
        W, H = self.image_size
        px = np.asarray(px, dtype=float)
        return bool(margin <= px[0] <= W - 1 - margin and margin <= px[1] <= H - 1 - margin)

    def to_dict(self):
        d = {"scale": self.scale, "principal_point": self.principal_point.tolist(),
             "image_size": list(self.image_size)}
        if self.has_perspective:
            d.update(focal=self.focal, plane_depth=self.plane_depth)
        return d

    @classmethod
    def from_dict(cls, d):
        if "focal" in d and "scale" not in d:
            return cls.from_perspective(d["focal"], d["plane_depth"], d["principal_point"], d["image_size"])
        return cls(d["scale"], d["principal_point"], d["image_size"], d.get("focal"), d.get("plane_depth"))


def skew(v):
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi):
    return Rotation.from_rotvec(np.asarray(phi, dtype=float)).as_matrix()


def so3_log(R):
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(Ra, Rb):
    """Geodesic angle (rad) between two rotations."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(e):
    """Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x).

    Accepts an :class:`EulerZYX` (bounds are checked) or a plain 3-vector
    ``(theta_x, theta_y, theta_z)`` which is only checked for the singularity.
    """
    if isinstance(e, EulerZYX):
        tx, ty, tz = e.validate()
    else:
        tx, ty, tz = _vec(e, 3, "euler angles")
        if abs(ty) >= np.pi / 2:
            raise GeometryError("theta_y at the ZYX singularity")
    return _rz(tz) @ _ry(ty) @ _rx(tx)


def rotation_to_euler(R):
    """Inverse of :func:`euler_to_rotation`; returns ``(theta_x, theta_y, theta_z)``."""
    R = check_rotation(R, tol=1e-6)
    ty = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(np.cos(ty)) < 1e-12:
        raise GeometryError("rotation is at the ZYX singularity")
    tx = np.arctan2(R[2, 1], R[2, 2])
    tz = np.arctan2(R[1, 0], R[0, 0])
    return np.array([tx, ty, tz])


def tip_world(pose_ee, r_tip):
    """Tool-tip position in the robot base frame."""
    r = r_tip.r_tip if isinstance(r_tip, ToolOffset) else np.asarray(r_tip, dtype=float)
    return pose_ee.rotation @ r + pose_ee.translation


def to_camera(R, t_vec, p3d):
    """Map points (…, 3) into the camera frame."""
    p = np.asarray(p3d, dtype=float)
    return p @ np.asarray(R, dtype=float).T + np.asarray(t_vec, dtype=float)


def project_weak(cam, R, t_vec, p3d):
    """Weak-perspective projection; works on a single point or an (N, 3) array."""
    p_cam = to_camera(R, t_vec, p3d)
    return cam.principal_point + cam.scale * p_cam[..., :2]


def project_perspective(cam, R, t_vec, p3d):
    """Fixed-plane pinhole projection (depth replaced by ``plane_depth``)."""
    if not cam.has_perspective:
        raise ConfigurationError("camera has no perspective parameters")
    p_cam = to_camera(R, t_vec, p3d)
    K = np.array([[cam.focal / cam.plane_depth, 0.0, cam.principal_point[0]],
                  [0.0, cam.focal / cam.plane_depth, cam.principal_point[1]],
                  [0.0, 0.0, 1.0]])
    h = np.concatenate([p_cam[..., :2], np.ones(p_cam.shape[:-1] + (1,))], axis=-1)
    uvw = h @ K.T
    return uvw[..., :2] / uvw[..., 2:3]


def project_pinhole(cam, p_cam):
    """Full pinhole projection u = c + f*x/z of a camera-frame point.

    Agrees with :func:`project_perspective` whenever z equals the plane depth,
    and is the map whose derivative :func:`image_jacobian` returns.
    """
    if not cam.has_perspective:
        raise ConfigurationError("camera has no perspective parameters")
    p = np.asarray(p_cam, dtype=float)
    return cam.principal_point + cam.focal * p[..., :2] / p[..., 2:3]


def image_jacobian(cam, p_obs):
    if not cam.has_perspective:
        raise ConfigurationError("camera has no perspective parameters")
    du, dv = _vec(p_obs, 2, "p_obs") - cam.principal_point
    f = cam.focal
    return np.array([[f, 0.0, -du], [0.0, f, -dv]]) / cam.plane_depth


def rot_interaction(cam, p_cam):
    """Image motion per small camera-frame rotation ``delta_phi`` of a point."""
    x, y, z = _vec(p_cam, 3, "p_cam")
    return -cam.scale * np.array([[0.0, -z, y], [z, 0.0, -x]])


def damped_pinv(J, W_q=None, lam=0.1):
    """Weighted damped least-squares inverse W^-1 J^T (J W^-1 J^T + lam^2 I)^-1."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    m, n = J.shape
    W = np.eye(n) if W_q is None else np.asarray(W_q, dtype=float)
    if W.shape != (n, n) or not np.allclose(W, W.T, atol=1e-12):
        raise GeometryError("W_q must be symmetric n x n")
    if lam < 0:
        raise GeometryError("damping must be non-negative")
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("W_q must be positive definite") from exc
    W_inv = np.linalg.inv(L).T @ np.linalg.inv(L)
    A = J @ W_inv @ J.T + lam**2 * np.eye(m)
    return W_inv @ J.T @ np.linalg.inv(A)


def damped_pinv_bound(W_q, lam):
    """Upper bound on the spectral norm of :func:`damped_pinv`."""
    return 1.0 / (2.0 * lam * np.sqrt(np.min(np.linalg.eigvalsh(W_q))))
