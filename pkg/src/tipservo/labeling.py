"""Pseudo-labels from binary tool masks and image patches.

Tip pixels come from skeleton endpoints scored by distance to the image
border and temporal agreement with neighbouring frames.  Depth labels come
from sharpness: the sharpest frames of an axial scan define the focal plane.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

SQUARE = np.ones((3, 3), dtype=bool)
LAPLACE_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
DEPTH_CLASSES = ("below", "near", "above")


class LabelingError(ValueError):
    pass


@dataclass
class LabelParams:
    alpha: float = 0.5
    border_suppression: float = 3.0
    heatmap_sigma: float = 3.0
    sharp_top_fraction: float = 10.0  # percent
    sigma_preset: float = 1.0
    class_threshold: float = 0.5

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.sharp_top_fraction <= 100.0:
            raise ValueError("sharp_top_fraction is a percentage in (0, 100]")
        if self.sigma_preset <= 0 or self.class_threshold <= 0 or self.heatmap_sigma <= 0:
            raise ValueError("scales must be positive")
        return self


@dataclass
class Skeleton:
    pixels: np.ndarray  # (H, W) bool
    shape: tuple

    def coords(self):
        """Skeleton pixels as (x, y) rows in lexicographic (x, y) order."""
        ys, xs = np.nonzero(self.pixels)
        pts = np.column_stack([xs, ys])
        return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


@dataclass
class TipLabel:
    pixel: np.ndarray | None
    score: float
    frame: int = 0

    @property
    def labeled(self):
        return self.pixel is not None


@dataclass
class DepthLabel:
    z_raw: float
    z_corrected: float
    z_tilde: float
    depth_class: str


# ---------------------------------------------------------------- skeleton

def _erode(A):
    return ndimage.binary_erosion(A, structure=SQUARE, border_value=0)


def _open(A):
    return ndimage.binary_dilation(_erode(A), structure=SQUARE)


def skeletonize(mask):
    """Union over k of (A eroded k times) minus its opening by the 3x3 square."""
    A = np.asarray(mask, dtype=bool)
    if A.ndim != 2 or not A.any():
        raise LabelingError("mask must be a non-empty 2-D binary grid")
    S = np.zeros_like(A)
    E = A
    while E.any():
        S |= E & ~_open(E)
        E = _erode(E)
    return Skeleton(S, A.shape)


def neighbor_count(pixels):
    P = np.asarray(pixels, dtype=np.int32)
    k = np.ones((3, 3), dtype=np.int32)
    k[1, 1] = 0
    return ndimage.convolve(P, k, mode="constant", cval=0)


def endpoints(sk):
    """Skeleton pixels with exactly one 8-neighbour, as sorted (x, y) rows."""
    px = sk.pixels if isinstance(sk, Skeleton) else np.asarray(sk, bool)
    ys, xs = np.nonzero(px & (neighbor_count(px) == 1))
    pts = np.column_stack([xs, ys])
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))] if len(pts) else pts.reshape(0, 2)


def is_one_pixel_wide(sk):
    """True when no pixel has its whole 3x3 neighbourhood inside the skeleton."""
    px = sk.pixels if isinstance(sk, Skeleton) else np.asarray(sk, bool)
    return not _erode(px).any()


# ---------------------------------------------------------------- tip scoring

def border_distance(pts, image_size):
    W, H = image_size
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.min(np.column_stack([pts[:, 0], W - 1 - pts[:, 0], pts[:, 1], H - 1 - pts[:, 1]]), axis=1)


def _normalized(d):
    m = d.max() if len(d) else 0.0
    return d / m if m > 0 else np.zeros_like(d)


def select_tip(candidates, prev_tip=None, next_tip=None, params=None, image_size=None, frame=0):
    """Pick the tip among skeleton endpoints.

    Endpoints within ``border_suppression`` px of the border are removed (that
    is where the tool enters).  Remaining candidates score
    ``alpha * border + (1 - alpha) * (1 - temporal)``, both normalized over
    the candidate set.  Ties go to the lexicographically smallest (x, y).
    """
    params = (params or LabelParams()).validate()
    pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
    if len(pts):
        pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    d_b = border_distance(pts, image_size)
    keep = d_b > params.border_suppression
    pts, d_b = pts[keep], d_b[keep]
    if len(pts) == 0:
        return TipLabel(None, 0.0, frame)
    temporal = []
    for ref in (prev_tip, next_tip):
        if ref is not None:
            temporal.append(_normalized(np.linalg.norm(pts - np.asarray(ref, float), axis=1)))
    d_t = np.mean(temporal, axis=0) if temporal else np.zeros(len(pts))
    a = params.alpha if temporal else 1.0
    score = a * _normalized(d_b) + (1.0 - a) * (1.0 - d_t)
    k = int(np.argmax(score))  # first maximum = lexicographically smallest
    return TipLabel(pts[k], float(score[k]), frame)


def label_sequence(masks, params=None):
    """Tip labels for a clip using one forward and one backward sweep.

    The forward sweep scores each frame against the previous forward choice,
    the backward sweep against the next backward choice; the final label
    uses both neighbours.
    """
    params = params or LabelParams()
    masks = list(masks)
    if not masks:
        return []
    H, W = np.asarray(masks[0]).shape
    size = (W, H)
    cands = [endpoints(skeletonize(m)) for m in masks]
    n = len(masks)
    fwd = [None] * n
    prev = None
    for t in range(n):
        lab = select_tip(cands[t], prev, None, params, size, t)
        fwd[t] = lab.pixel
        prev = lab.pixel if lab.labeled else prev
    bwd = [None] * n
    nxt = None
    for t in range(n - 1, -1, -1):
        lab = select_tip(cands[t], None, nxt, params, size, t)
        bwd[t] = lab.pixel
        nxt = lab.pixel if lab.labeled else nxt
    out = []
    for t in range(n):
        p = fwd[t - 1] if t > 0 else None
        q = bwd[t + 1] if t + 1 < n else None
        out.append(select_tip(cands[t], p, q, params, size, t))
    return out


# ---------------------------------------------------------------- heatmaps

def gaussian_heatmap(p, sigma, size):
    """(H, W) grid with exp(-|(x, y) - p|^2 / (2 sigma^2)); ``size`` is (W, H)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    W, H = size
    x = np.arange(W)[None, :]
    y = np.arange(H)[:, None]
    return np.exp(-((x - p[0]) ** 2 + (y - p[1]) ** 2) / (2.0 * sigma**2))


def soft_argmax(H, tau=16.0):
    """Expected (x, y) under softmax(tau * H)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    H = np.asarray(H, dtype=float)
    z = tau * (H - H.max())
    w = np.exp(z)
    w /= w.sum()
    ys, xs = np.indices(H.shape)
    return np.array([(w * xs).sum(), (w * ys).sum()])


# ---------------------------------------------------------------- sharpness / depth

def patch_sharpness(patch):
    """Variance of the 4-neighbour Laplacian over the patch interior."""
    P = np.asarray(patch, dtype=float)
    if P.ndim != 2 or min(P.shape) < 3:
        raise LabelingError("patch must be at least 3x3")
    lap = (P[:-2, 1:-1] + P[2:, 1:-1] + P[1:-1, :-2] + P[1:-1, 2:] - 4.0 * P[1:-1, 1:-1])
    return float(lap.var())


def gradient_energy(patch):
    """Mean Sobel gradient energy Gx^2 + Gy^2."""
    P = np.asarray(patch, dtype=float)
    gx = ndimage.sobel(P, axis=1, mode="nearest")
    gy = ndimage.sobel(P, axis=0, mode="nearest")
    return float(np.mean(gx**2 + gy**2))


def focal_plane_label(frames, score=gradient_energy):
    """Index and depth of the sharpest frame; ties resolve to the first."""
    frames = list(frames)
    if not frames:
        raise LabelingError("no frames")
    vals = np.array([score(p) for _, p in frames])
    k = int(np.argmax(vals))
    return k, float(frames[k][0])


def depth_class(z_tilde, delta):
    if z_tilde < -delta:
        return "below"
    if z_tilde > delta:
        return "above"
    return "near"


def focal_offset(z_raw, sharpness, top_fraction):
    z_raw = np.asarray(z_raw, dtype=float)
    sharp = np.asarray(sharpness, dtype=float)
    n = len(z_raw)
    k = int(math.ceil(n * top_fraction / 100.0 - 1e-12))
    if n == 0 or k == 0:
        raise LabelingError("no records in the sharpest set")
    order = np.argsort(-sharp, kind="stable")
    return float(z_raw[order[:k]].mean())


def normalize_depth(records, params=None):
    """Centre raw depths on the sharpest records and assign depth classes."""
    params = (params or LabelParams()).validate()
    recs = list(records)
    z = np.array([r[0] for r in recs], dtype=float)
    s = np.array([r[1] for r in recs], dtype=float)
    mu = focal_offset(z, s, params.sharp_top_fraction)
    out = []
    for zr in z:
        zc = zr - mu
        zt = zc / params.sigma_preset
        out.append(DepthLabel(float(zr), float(zc), float(zt), depth_class(zt, params.class_threshold)))
    return out


class DepthLabelNormalizer(TransformerMixin, BaseEstimator):
    """Learns the focal offset from (z_raw, sharpness) rows; transforms depths.

    ``transform`` returns an (n, 2) array of corrected depth and z-tilde;
    ``predict`` returns class names.
    """

    def __init__(self, sharp_top_fraction=10.0, sigma_preset=1.0, class_threshold=0.5):
        self.sharp_top_fraction = sharp_top_fraction
        self.sigma_preset = sigma_preset
        self.class_threshold = class_threshold

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        self.mu_z_ = focal_offset(X[:, 0], X[:, 1], self.sharp_top_fraction)
        return self

    def transform(self, X):
        check_is_fitted(self, "mu_z_")
        z = np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0]
        zc = z - self.mu_z_
        return np.column_stack([zc, zc / self.sigma_preset])

    def predict(self, X):
        zt = self.transform(X)[:, 1]
        return np.array([depth_class(v, self.class_threshold) for v in zt])


# ---------------------------------------------------------------- mask I/O

def write_pgm(path, mask):
    M = (np.asarray(mask, dtype=bool).astype(np.uint8) * 255)
    H, W = M.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write(M.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise LabelingError("only binary PGM (P5) is supported")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    arr = np.frombuffer(data[pos:], dtype=dtype, count=W * H).reshape(H, W)
    return arr > 0


def write_packed(path, mask):
    """Packed-bit mask: two little-endian int32 (W, H) then row-major bits."""
    M = np.asarray(mask, dtype=bool)
    H, W = M.shape
    with open(path, "wb") as fh:
        fh.write(np.array([W, H], dtype="<i4").tobytes())
        fh.write(np.packbits(M.reshape(-1)).tobytes())


def read_packed(path):
    with open(path, "rb") as fh:
        W, H = np.frombuffer(fh.read(8), dtype="<i4")
        bits = np.unpackbits(np.frombuffer(fh.read(), dtype=np.uint8))
    return bits[: W * H].reshape(H, W).astype(bool)
