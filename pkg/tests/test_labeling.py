import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from tipservo.labeling import (DepthLabelNormalizer, LabelParams, LabelingError, endpoints, focal_plane_label,
                               gaussian_heatmap, gradient_energy, is_one_pixel_wide, label_sequence,
                               normalize_depth, patch_sharpness, read_packed, read_pgm, select_tip,
                               skeletonize, soft_argmax, write_packed, write_pgm)
from tipservo.scenario import Rig, render_mask, sharpness_profile


# --- set-based oracle for the morphological skeleton

def _set_erode(S, shape):
    H, W = shape
    return {(y, x) for (y, x) in S
            if all((y + dy, x + dx) in S for dy in (-1, 0, 1) for dx in (-1, 0, 1))}


def _set_dilate(S, shape):
    H, W = shape
    return {(y + dy, x + dx) for (y, x) in S for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if 0 <= y + dy < H and 0 <= x + dx < W}


def _set_skeleton(mask):
    S = {tuple(p) for p in np.argwhere(mask)}
    out = set()
    while S:
        opened = _set_dilate(_set_erode(S, mask.shape), mask.shape) & S
        out |= S - opened
        S = _set_erode(S, mask.shape)
    return out


def test_thin_line_is_its_own_skeleton():
    m = np.zeros((9, 12), bool)
    m[4, 2:10] = True
    assert np.array_equal(skeletonize(m).pixels, m)


def test_square_matches_set_oracle():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    sk = skeletonize(m).pixels
    assert {tuple(p) for p in np.argwhere(sk)} == _set_skeleton(m)


@given(st.lists(st.booleans(), min_size=64, max_size=64))
def test_skeleton_matches_oracle_and_is_contained(bits):
    m = np.array(bits).reshape(8, 8)
    if not m.any():
        with pytest.raises(LabelingError):
            skeletonize(m)
        return
    sk = skeletonize(m).pixels
    assert not (sk & ~m).any()
    assert {tuple(p) for p in np.argwhere(sk)} == _set_skeleton(m)


def test_endpoints_of_segment_and_single_pixel():
    m = np.zeros((5, 10), bool)
    m[2, 3:8] = True
    assert endpoints(m).tolist() == [[3, 2], [7, 2]]
    one = np.zeros((5, 5), bool)
    one[2, 2] = True
    assert len(endpoints(one)) == 0


def test_y_shape_has_three_endpoints():
    m = np.zeros((20, 20), bool)
    for i in range(6):
        m[10 + i, 10] = True
        m[10 - i, 10 - i] = True
        m[10 - i, 10 + i] = True
    e = endpoints(m)
    # neighbour-count oracle
    k = np.ones((3, 3), int)
    k[1, 1] = 0
    nb = ndimage.convolve(m.astype(int), k, mode="constant")
    assert len(e) == int((m & (nb == 1)).sum()) == 3


def test_border_endpoint_suppressed():
    tip = select_tip([[0, 50], [40, 50]], params=LabelParams(), image_size=(100, 100))
    assert tip.pixel.tolist() == [40, 50]


def test_spatial_only_picks_farthest_from_border():
    tip = select_tip([[10, 50], [50, 50], [30, 20]], params=LabelParams(alpha=1.0), image_size=(100, 100))
    assert tip.pixel.tolist() == [50, 50]


@given(st.permutations([[10, 50], [50, 48], [30, 20], [70, 60]]))
def test_select_tip_order_invariant(order):
    ref = select_tip([[10, 50], [50, 48], [30, 20], [70, 60]], prev_tip=(52, 47), image_size=(100, 100))
    got = select_tip(order, prev_tip=(52, 47), image_size=(100, 100))
    assert got.pixel.tolist() == ref.pixel.tolist()


def test_label_sequence_on_rendered_frames():
    rig = Rig.default()
    rng = np.random.default_rng(1)
    poses, masks = [], []
    for i in range(200):
        p = rig.pose_for_tip_camera([0.8 * np.sin(i / 20), 0.5 * np.cos(i / 31), 0.0])
        poses.append(p)
        masks.append(render_mask(rig, p, 1))
    labels = label_sequence(masks)
    for p, lab, m in zip(poses, labels, masks):
        assert is_one_pixel_wide(skeletonize(m))
        assert lab.pixel.tolist() == np.rint(rig.tip_pixel(p)).astype(int).tolist()


def test_gaussian_heatmap_peak_and_half_width():
    p = (20.0, 15.0)
    sigma = 3.0
    H = gaussian_heatmap(p, sigma, (40, 30))
    assert H[15, 20] == 1.0
    d = sigma * np.sqrt(2 * np.log(2))
    assert np.isclose(gaussian_heatmap(p, sigma, (80, 30))[15, 20] * 0 + np.exp(-d**2 / (2 * sigma**2)), 0.5)
    assert 0.0 <= H.min() and H.max() <= 1.0


@given(st.floats(9, 30), st.floats(9, 20))
def test_soft_argmax_recovers_peak(x, y):
    H = gaussian_heatmap((x, y), 3.0, (40, 30))
    assert np.allclose(soft_argmax(H), (x, y), atol=0.01)


def test_soft_argmax_limits():
    H = np.zeros((7, 9))
    H[2, 5] = 1.0
    assert np.allclose(soft_argmax(H, tau=1e3), (5, 2))
    assert np.allclose(soft_argmax(np.ones((7, 9))), (4, 3))
    d = [np.linalg.norm(soft_argmax(H, tau=t) - (4, 3)) for t in (10, 1, 0.1, 0.01)]
    assert all(a > b for a, b in zip(d, d[1:])) and d[-1] < 0.05


def test_sharpness_scores():
    assert patch_sharpness(np.full((8, 8), 3.0)) == 0.0
    cb = np.indices((8, 8)).sum(0) % 2.0
    ramp = np.tile(np.arange(8.0), (8, 1)) / 8
    assert patch_sharpness(cb) > patch_sharpness(ramp)
    cb2 = (np.indices((8, 8)) // 2).sum(0) % 2.0
    assert gradient_energy(cb2) > gradient_energy(ramp)


def test_patch_sharpness_matches_convolution_oracle(rng):
    P = rng.random((12, 10))
    lap = ndimage.convolve(P, np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float))[1:-1, 1:-1]
    assert abs(patch_sharpness(P) - lap.var()) < 1e-12


def test_focal_plane_label_examples():
    assert focal_plane_label([(0.0, 1), (1.0, 5), (2.0, 2)], score=lambda p: p)[0] == 1
    assert focal_plane_label([(0.0, 3), (1.0, 3)], score=lambda p: p)[0] == 0


def test_focal_plane_label_on_axial_scan():
    rig = Rig.default(z_star=0.2)
    zs = np.linspace(-2, 2, 81)
    k, z = focal_plane_label([(z, sharpness_profile(rig, z)) for z in zs], score=lambda s: s)
    assert abs(z - 0.2) <= zs[1] - zs[0]


def test_normalize_depth_centering_and_classes():
    recs = [(z, 1.0) for z in (1.0, 2.0, 6.0)]
    labs = normalize_depth(recs, LabelParams(sharp_top_fraction=100.0))
    assert abs(sum(l.z_corrected for l in labs)) < 1e-12
    mid = normalize_depth([(0.5, 1.0), (0.5, 0.2)], LabelParams(sharp_top_fraction=50.0))
    assert all(l.depth_class == "near" for l in mid)


def test_normalizer_recovers_focal_plane():
    rig = Rig.default(z_star=0.73)
    z = np.linspace(-2, 3, 201)
    X = np.column_stack([z, sharpness_profile(rig, z)])
    est = DepthLabelNormalizer(sharp_top_fraction=2.0).fit(X)
    assert abs(est.mu_z_ - 0.73) <= z[1] - z[0]
    assert est.predict(np.array([[0.73, 0.0], [3.0, 0.0], [-2.0, 0.0]])).tolist() == ["near", "above", "below"]


def test_mask_io_round_trip(tmp_path, rng):
    m = rng.random((13, 21)) > 0.5
    write_pgm(tmp_path / "m.pgm", m)
    write_packed(tmp_path / "m.bin", m)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), m)
    assert np.array_equal(read_packed(tmp_path / "m.bin"), m)
