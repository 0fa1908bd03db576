import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hairsplat.errors import DegenerateInputError, ShapeError
from hairsplat.hairmap import HairMap, PcaHairMap, decode_map, root_grid
from hairsplat.losses import (
    COARSE_WEIGHTS,
    FINE_WEIGHTS,
    HYBRID_WEIGHTS,
    INVERSION_WEIGHTS,
    LossWeights,
    TargetMaps,
    combine_real,
    depth_loss,
    dirmap_loss,
    hybrid_loss,
    mae_loss,
    mask_loss,
    pca_loss,
    pen_loss,
    point_loss,
    real_loss,
    seg_loss,
    undir_metric,
    weighted_mae_loss,
)
from hairsplat.render import RenderBuffers
from hairsplat.scalp import HeadModel
from oracles import central_diff, point_loss_loop


def buffers(sil, direction=None, depth=None):
    sil = np.asarray(sil, dtype=float)
    direction = np.zeros(sil.shape + (2,)) if direction is None else np.asarray(direction, dtype=float)
    depth = np.zeros(sil.shape) if depth is None else np.asarray(depth, dtype=float)
    return RenderBuffers(sil, direction, depth, sil > 0)


def targets(sil, direction=None, depth=None, valid=None, rng_=(0.0, 1.0)):
    sil = np.asarray(sil, dtype=float)
    direction = np.zeros(sil.shape + (2,)) if direction is None else direction
    depth = np.zeros(sil.shape) if depth is None else depth
    valid = sil > 0.5 if valid is None else valid
    return TargetMaps(sil, direction, depth, valid, rng_)


def smooth_strand(rng, L=10):
    return np.cumsum(rng.normal(scale=0.1, size=(L, 3)), axis=0)


def test_point_loss_zero_and_translation(rng):
    s = smooth_strand(rng)
    assert point_loss(s, s)[0] == 0.0
    value, _ = point_loss(s + [0.3, 0, 0], s)
    assert value == pytest.approx(10 * 0.3)


def test_point_loss_matches_loop(rng):
    pred, gt = smooth_strand(rng), smooth_strand(rng)
    w = COARSE_WEIGHTS
    assert point_loss(pred, gt, w)[0] == pytest.approx(point_loss_loop(pred, gt, w.lambda_dir, w.lambda_curv), rel=1e-12)


def test_point_loss_gradient_fd(rng):
    w = LossWeights(lambda_dir=0.3, lambda_curv=0.7)
    for _ in range(5):
        pred, gt = smooth_strand(rng), smooth_strand(rng)
        _, g = point_loss(pred, gt, w)
        fd = central_diff(lambda p: point_loss(p, gt, w)[0], pred, 1e-5)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)
        assert np.mean(rel < 1e-3) >= 0.95


def _hairmaps(rng, basis, head, shape=(3, 3)):
    roots = root_grid(head, *shape)
    ones = np.ones(shape)
    ones[0, 0] = 0
    a = decode_map(PcaHairMap(rng.normal(size=shape + (64,)) * basis.stddev, ones), basis, roots)
    b = decode_map(PcaHairMap(rng.normal(size=shape + (64,)) * basis.stddev, ones), basis, roots)
    return a, b


def test_mae_loss_matches_loop(rng, basis, head):
    a, b = _hairmaps(rng, basis, head)
    w = COARSE_WEIGHTS
    H, W = a.shape
    L = a.num_points
    total = 0.0
    for i in range(H):
        for j in range(W):
            if a.active[i, j] and b.active[i, j]:
                total += point_loss_loop(a.points[i, j], b.points[i, j], w.lambda_dir, w.lambda_curv)
    assert mae_loss(a, b, w)[0] == pytest.approx(total / (H * W * L), rel=1e-9)
    assert mae_loss(a, a, w)[0] == 0.0


def test_mae_single_point_difference(basis, head, rng):
    a, _ = _hairmaps(rng, basis, head)
    pts = a.points.copy()
    pts[1, 1, -1] += [0.0, 0.0, 0.01]
    b = HairMap(pts, a.active, a.roots)
    value, _ = mae_loss(b, a, LossWeights(lambda_dir=0.0, lambda_curv=0.0))
    assert value == pytest.approx(0.01 / (9 * a.num_points))


def test_weighted_mae(rng, basis, head):
    a, b = _hairmaps(rng, basis, head)
    shape = a.points.shape[:-1]
    w = FINE_WEIGHTS
    assert weighted_mae_loss(a, b, np.full(shape, 3.0), w)[0] == pytest.approx(
        mae_loss(a, b, w)[0] * 9 * a.num_points / (8 * a.num_points), rel=1e-12)
    assert weighted_mae_loss(a, a, np.ones(shape), w)[0] == 0.0
    with pytest.raises(DegenerateInputError):
        weighted_mae_loss(a, b, np.zeros(shape), w)


def test_weighted_mae_two_point_closed_form():
    roots = root_grid(HeadModel(), 1, 1)
    gt = np.zeros((1, 1, 2, 3))
    pred = gt.copy()
    pred[0, 0, 0] = [0.1, 0, 0]
    pred[0, 0, 1] = [0.3, 0, 0]
    w0 = LossWeights(lambda_dir=0.0, lambda_curv=0.0)
    a = HairMap(pred, np.ones((1, 1), bool), roots)
    b = HairMap(gt, np.ones((1, 1), bool), roots)
    value, _ = weighted_mae_loss(a, b, np.array([[[3.0, 1.0]]]), w0)
    assert value == pytest.approx((3 * 0.1 + 1 * 0.3) / 4)


def test_pca_and_mask_loss(rng):
    Z = rng.normal(size=(4, 5, 6))
    assert pca_loss(Z, Z)[0] == 0.0
    Z2 = Z.copy()
    Z2[1, 2, 3] += 1.0
    assert pca_loss(Z2, Z)[0] == pytest.approx(1.0 / 20)
    ref = np.mean([np.linalg.norm(a - b) for a, b in zip(Z.reshape(-1, 6), Z2.reshape(-1, 6)[::-1])])
    assert pca_loss(Z, Z2.reshape(-1, 6)[::-1].reshape(Z.shape))[0] == pytest.approx(ref, rel=1e-12)
    M = rng.uniform(size=(4, 5))
    assert mask_loss(M, M)[0] == 0.0
    assert mask_loss(np.ones((3, 3)), np.zeros((3, 3)))[0] == 1.0
    M2 = rng.uniform(size=(4, 5))
    assert mask_loss(M, M2)[0] == pytest.approx(sum(abs(a - b) for a, b in zip(M.ravel(), M2.ravel())) / 20)


def test_seg_loss_loop(rng):
    s, t = rng.uniform(size=(5, 6)), rng.uniform(size=(5, 6))
    ref = sum(abs(s[i, j] - t[i, j]) for i in range(5) for j in range(6)) / 30
    assert seg_loss(buffers(s), targets(t))[0] == pytest.approx(ref, rel=1e-12)
    assert seg_loss(buffers(t), targets(t))[0] == 0.0


def test_dirmap_loss_cases(rng):
    sil = np.array([[1.0, 1.0, 0.0]])
    d = np.zeros((1, 3, 2))
    d[0, :2] = [1.0, 0.0]
    assert dirmap_loss(buffers(sil, d), targets(sil, d))[0] == 0.0
    assert dirmap_loss(buffers(sil, -d), targets(sil, d))[0] == pytest.approx(2.0)
    s, t = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
    t[0] = 0
    a, b = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    tm = targets(t, b)
    total, n = 0.0, 0
    for i in range(4):
        for j in range(4):
            if t[i, j] > 0:
                total += abs(a[i, j, 0] - b[i, j, 0]) + abs(a[i, j, 1] - b[i, j, 1])
                n += 1
    assert dirmap_loss(buffers(s, a), tm)[0] == pytest.approx(total / n, rel=1e-12)


def test_depth_loss_cases(rng):
    sil = np.ones((3, 3))
    dep = rng.uniform(size=(3, 3))
    tm = targets(sil, depth=dep)
    assert depth_loss(buffers(sil, depth=dep), tm)[0] == 0.0
    assert depth_loss(buffers(sil, depth=dep + 0.2), tm)[0] == pytest.approx(0.2)
    # masked loop with a non-trivial depth range
    s = rng.uniform(size=(6, 6))
    t = rng.uniform(size=(6, 6))
    rd = rng.uniform(1.0, 2.0, size=(6, 6))
    td = rng.uniform(size=(6, 6))
    valid = rng.uniform(size=(6, 6)) < 0.8
    tm = targets(t, depth=td, valid=valid, rng_=(1.0, 2.0))
    total, n = 0.0, 0
    for i in range(6):
        for j in range(6):
            if s[i, j] > 0.5 and t[i, j] > 0.5 and valid[i, j]:
                total += abs((rd[i, j] - 1.0) - td[i, j])
                n += 1
    assert depth_loss(buffers(s, depth=rd), tm)[0] == pytest.approx(total / n, rel=1e-12)


def test_pen_loss_cases():
    head = HeadModel(radii=(1.0, 1.0, 1.0))
    roots = root_grid(head, 2, 2)
    pts = np.zeros((2, 2, 4, 3))
    pts[..., 2] = 2.0
    active = np.ones((2, 2), bool)
    assert pen_loss(HairMap(pts, active, roots), head)[0] == 0.0
    pts[0, 1, 2] = 0.0
    value, grad = pen_loss(HairMap(pts, active, roots), head)
    assert value == pytest.approx(1.0 / 16)
    assert grad.shape == pts.shape


def test_pen_loss_gradient_fd(rng):
    head = HeadModel()
    roots = root_grid(head, 2, 2)
    pts = rng.normal(scale=0.07, size=(2, 2, 5, 3))
    active = np.ones((2, 2), bool)
    _, g = pen_loss(HairMap(pts, active, roots), head)
    fd = central_diff(lambda p: pen_loss(HairMap(p, active, roots), head)[0], pts, 1e-7)
    assert np.allclose(g, fd, rtol=1e-3, atol=1e-7)


def test_combined_weights_from_recipe():
    assert combine_real(1, 1, 1, 1, INVERSION_WEIGHTS) == pytest.approx(2.11)
    assert combine_real(0, 0, 0, 0, INVERSION_WEIGHTS) == 0.0
    assert combine_real(1, 1, 1, 1, HYBRID_WEIGHTS) == pytest.approx(10 + 5 + 0.1 + 0.01)
    assert hybrid_loss(1.0, 1.0, 0.5) == 1.5
    assert hybrid_loss(2.0, 7.0, 0.0) == 2.0
    assert hybrid_loss(1.0, 3.0, 0.6) - hybrid_loss(1.0, 3.0, 0.2) == pytest.approx(2 * (hybrid_loss(1.0, 3.0, 0.4) - hybrid_loss(1.0, 3.0, 0.2)))


def test_real_loss_linear_in_terms(rng):
    head = HeadModel()
    s, t = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
    roots = root_grid(head, 1, 1)
    hair = HairMap(np.full((1, 1, 3, 3), 0.5), np.ones((1, 1), bool), roots)
    out = real_loss(buffers(s), hair, targets(t), head)
    terms = out.terms
    w2 = INVERSION_WEIGHTS.with_(lambda_seg=2.0)
    out2 = real_loss(buffers(s), hair, targets(t), head, w2)
    assert out2.total - out.total == pytest.approx(terms["seg"])


def test_undir_metric_properties(rng):
    b = rng.normal(size=(10, 10, 2))
    assert undir_metric(b, b) == 0.0
    assert undir_metric(b, -b) == 0.0
    perp = np.stack([-b[..., 1], b[..., 0]], axis=-1)
    assert undir_metric(b, perp) == np.pi / 2
    c = rng.normal(size=(10, 10, 2))
    assert undir_metric(b, c) == undir_metric(c, b)
    with pytest.raises(DegenerateInputError):
        undir_metric(b, c, np.zeros((10, 10), bool))
    with pytest.raises(ShapeError):
        undir_metric(b, c[:5])


vec2 = arrays(np.float64, (6, 2), elements=st.floats(-5, 5, allow_nan=False).filter(lambda x: abs(x) > 1e-3))


@settings(max_examples=100, deadline=None)
@given(vec2, vec2)
def test_undir_metric_bounds_property(a, b):
    m = undir_metric(a, b)
    assert 0.0 <= m <= np.pi / 2
    assert undir_metric(a, -b) == pytest.approx(m, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_losses_nonnegative_property(s, t):
    assert seg_loss(buffers(s), targets(t))[0] >= 0
    assert mask_loss(s, t)[0] >= 0
