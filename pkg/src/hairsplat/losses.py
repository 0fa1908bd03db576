"""Geometry, rendering and penetration losses with analytic gradients."""

from __future__ import annotations

import math

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .codec import COARSE_COMPONENTS, curvature, segment_directions
from .errors import DegenerateInputError, ShapeError
from .hairmap import HairMap
from .render import RenderBuffers
from .scalp import HeadModel, head_sdf

SIL_THRESHOLD = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_pca: float = 0.1
    lambda_dir: float = 0.1
    lambda_curv: float = 1.0
    lambda_mask: float = 0.0001
    lambda_seg: float = 1.0
    lambda_dirmap: float = 0.8
    lambda_pen: float = 0.3
    lambda_depth: float = 0.01
    mixing_rate_r: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def with_(self, **kw) -> "LossWeights":
        return replace(self, **kw)


# per-stage defaults of the training/inversion recipe
COARSE_WEIGHTS = LossWeights(lambda_pca=0.1, lambda_dir=0.1, lambda_curv=1.0, lambda_mask=0.0001)
FINE_WEIGHTS = LossWeights(lambda_pca=10.0, lambda_dir=0.1, lambda_curv=0.1, lambda_mask=0.0001)
JOINT_WEIGHTS = LossWeights(lambda_pca=1.0, lambda_dir=0.1, lambda_curv=0.1, lambda_mask=0.0001)
HYBRID_WEIGHTS = LossWeights(
    lambda_pca=0.1, lambda_dir=0.1, lambda_curv=0.1, lambda_mask=0.0001,
    lambda_seg=10.0, lambda_dirmap=5.0, lambda_pen=0.1, lambda_depth=0.01, mixing_rate_r=0.5,
)
INVERSION_WEIGHTS = LossWeights(lambda_seg=1.0, lambda_dirmap=0.8, lambda_pen=0.3, lambda_depth=0.01)
STAGE_WEIGHTS = {
    "coarse": COARSE_WEIGHTS,
    "fine": FINE_WEIGHTS,
    "joint": JOINT_WEIGHTS,
    "hybrid": HYBRID_WEIGHTS,
    "inversion": INVERSION_WEIGHTS,
}


@dataclass(frozen=True)
class TargetMaps:
    """Per-view supervision.

    ``depth`` is normalized to [0, 1] on ``depth_valid`` pixels; rendered
    camera depth is mapped through ``depth_range = (lo, hi)`` as
    ``(d - lo) / (hi - lo)`` before comparison.
    """

    silhouette: np.ndarray
    direction: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    depth_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        sil = np.asarray(self.silhouette, dtype=np.float64)
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.shape != sil.shape + (2,) or np.shape(self.depth) != sil.shape:
            raise ShapeError("target maps disagree in shape")
        direction = np.where((sil > 0)[..., None], direction, 0.0)
        object.__setattr__(self, "silhouette", sil)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        object.__setattr__(self, "depth_valid", np.asarray(self.depth_valid, dtype=bool))
        object.__setattr__(self, "depth_range", tuple(float(x) for x in self.depth_range))

    @property
    def shape(self):
        return self.silhouette.shape


# --- strand geometry -------------------------------------------------------


def _point_terms(pred, gt, lam_dir, lam_curv, point_weights=None, fallback=(0.0, 0.0, 1.0)):
    """Per-point loss terms and the gradient of their weighted sum.

    Point ``j`` carries the position term, the direction term of segment ``j``
    (``j < L-1``) and the curvature term of the bend centred on it
    (``0 < j < L-1``).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"strand shapes differ: {pred.shape} vs {gt.shape}")
    L = pred.shape[-2]
    w = np.ones(pred.shape[:-1]) if point_weights is None else np.broadcast_to(point_weights, pred.shape[:-1])

    diff = pred - gt
    pos = np.linalg.norm(diff, axis=-1)
    grad = np.where(pos[..., None] > 0, diff / np.where(pos > 0, pos, 1.0)[..., None], 0.0) * w[..., None]
    terms = pos.copy()

    dv = np.diff(pred, axis=-2) - np.diff(gt, axis=-2)
    dir_terms = lam_dir * np.abs(dv).sum(axis=-1)
    terms[..., :-1] += dir_terms
    g_v = lam_dir * np.sign(dv) * w[..., :-1, None]

    if L >= 3 and lam_curv != 0:
        b, length, _ = segment_directions(pred, fallback)
        g_pred, _ = curvature(pred, fallback)
        g_gt, _ = curvature(gt, fallback)
        dg = g_pred - g_gt
        terms[..., 1:-1] += lam_curv * np.abs(dg)
        cross = np.cross(b[..., :-1, :], b[..., 1:, :])
        gnorm = np.linalg.norm(cross, axis=-1)
        coef = lam_curv * np.sign(dg) * w[..., 1:-1]
        g_c = np.where(gnorm[..., None] > 0, cross / np.where(gnorm > 0, gnorm, 1.0)[..., None], 0.0)
        g_c *= coef[..., None]
        g_b = np.zeros_like(b)
        g_b[..., :-1, :] += np.cross(b[..., 1:, :], g_c)
        g_b[..., 1:, :] += np.cross(g_c, b[..., :-1, :])
        safe = np.where(length > 0, length, 1.0)[..., None]
        g_v = g_v + (g_b - b * np.sum(b * g_b, axis=-1, keepdims=True)) / safe

    grad[..., 1:, :] += g_v
    grad[..., :-1, :] -= g_v
    return terms, grad


def point_loss(pred, gt, weights: LossWeights = COARSE_WEIGHTS):
    """Summed point-wise loss of one or more strands and its gradient w.r.t. ``pred``."""
    terms, grad = _point_terms(pred, gt, weights.lambda_dir, weights.lambda_curv)
    return float(terms.sum()), grad


def _common_active(pred: HairMap, gt: HairMap):
    if pred.points.shape != gt.points.shape:
        raise ShapeError(f"hair maps differ: {pred.points.shape} vs {gt.points.shape}")
    return pred.active & gt.active


def mae_loss(pred: HairMap, gt: HairMap, weights: LossWeights = COARSE_WEIGHTS):
    """Point loss averaged over all ``H*W*L`` points (bald texels contribute zero)."""
    both = _common_active(pred, gt)
    H, W = both.shape
    L = pred.num_points
    grad = np.zeros_like(pred.points)
    if not both.any():
        return 0.0, grad
    terms, g = _point_terms(pred.points[both], gt.points[both], weights.lambda_dir, weights.lambda_curv)
    norm = H * W * L
    grad[both] = g / norm
    return float(terms.sum() / norm), grad


def weighted_mae_loss(pred: HairMap, gt: HairMap, vis_weights, weights: LossWeights = FINE_WEIGHTS):
    """Visibility-weighted point loss ``sum w L / sum w`` over commonly active texels."""
    both = _common_active(pred, gt)
    vis = np.asarray(vis_weights, dtype=np.float64)
    if vis.shape != pred.points.shape[:-1]:
        raise ShapeError(f"visibility weights {vis.shape} do not match points {pred.points.shape[:-1]}")
    w = vis[both]
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("visibility weights sum to zero")
    terms, g = _point_terms(pred.points[both], gt.points[both], weights.lambda_dir, weights.lambda_curv, w)
    grad = np.zeros_like(pred.points)
    grad[both] = g / total
    return float(np.sum(w * terms) / total), grad


def pca_loss(pred_Z, gt_Z):
    """Mean over texels of the per-texel L2 distance between coefficient vectors."""
    diff = np.asarray(pred_Z, dtype=np.float64) - np.asarray(gt_Z, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=-1)
    n = norm.size
    grad = np.where(norm[..., None] > 0, diff / np.where(norm > 0, norm, 1.0)[..., None], 0.0) / n
    return float(norm.mean()), grad


def mask_loss(pred_M, gt_M):
    diff = np.asarray(pred_M, dtype=np.float64) - np.asarray(gt_M, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def coarse_loss(pred: HairMap, gt: HairMap, pred_Z, gt_Z, pred_M, gt_M, weights=COARSE_WEIGHTS, split=COARSE_COMPONENTS):
    mae, _ = mae_loss(pred, gt, weights)
    pca, _ = pca_loss(np.asarray(pred_Z)[..., :split], np.asarray(gt_Z)[..., :split])
    mask, _ = mask_loss(pred_M, gt_M)
    return mae + weights.lambda_pca * pca + weights.lambda_mask * mask


def fine_loss(pred, gt, pred_Z, gt_Z, pred_M, gt_M, vis_weights, weights=FINE_WEIGHTS, split=COARSE_COMPONENTS):
    mae, _ = weighted_mae_loss(pred, gt, vis_weights, weights)
    pca, _ = pca_loss(np.asarray(pred_Z)[..., split:], np.asarray(gt_Z)[..., split:])
    mask, _ = mask_loss(pred_M, gt_M)
    return mae + weights.lambda_pca * pca + weights.lambda_mask * mask


def synth_loss(coarse_term: float, fine_term: float) -> float:
    return coarse_term + fine_term


# --- rendering losses -------------------------------------------------------


def _check(render: RenderBuffers, target: TargetMaps):
    if render.shape != target.shape:
        raise ShapeError(f"render {render.shape} and target {target.shape} differ")


def seg_loss(render: RenderBuffers, target: TargetMaps):
    """Mean absolute silhouette difference over all pixels; returns ``(value, d/d silhouette)``."""
    _check(render, target)
    diff = render.silhouette - target.silhouette
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def dirmap_loss(render: RenderBuffers, target: TargetMaps):
    """Mean L1 direction error over pixels where the target silhouette is non-zero."""
    _check(render, target)
    mask = target.silhouette > 0
    n = int(mask.sum())
    grad = np.zeros_like(render.direction)
    if n == 0:
        return 0.0, grad
    diff = render.direction - target.direction
    grad[mask] = np.sign(diff[mask]) / n
    return float(np.abs(diff[mask]).sum() / n), grad


def depth_mask(render: RenderBuffers, target: TargetMaps) -> np.ndarray:
    return (render.silhouette > SIL_THRESHOLD) & (target.silhouette > SIL_THRESHOLD) & target.depth_valid


def normalized_render_depth(render: RenderBuffers, target: TargetMaps) -> np.ndarray:
    lo, hi = target.depth_range
    return (render.depth - lo) / (hi - lo)


def depth_loss(render: RenderBuffers, target: TargetMaps):
    """Masked mean L1 between normalized rendered depth and target depth."""
    _check(render, target)
    mask = depth_mask(render, target)
    grad = np.zeros_like(render.depth)
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    lo, hi = target.depth_range
    diff = normalized_render_depth(render, target) - target.depth
    grad[mask] = np.sign(diff[mask]) / (n * (hi - lo))
    return float(np.abs(diff[mask]).sum() / n), grad


def pen_loss(hair: HairMap, head: HeadModel):
    """Mean ReLU(-sdf) over all ``H*W*L`` strand points; gradient w.r.t. ``hair.points``."""
    H, W = hair.shape
    return pen_loss_points(hair.points[hair.active], head, norm=H * W * hair.num_points, full_shape=hair)


def pen_loss_points(points, head: HeadModel, norm=None, full_shape=None):
    points = np.asarray(points, dtype=np.float64)
    norm = points.shape[0] * points.shape[1] if norm is None else norm
    sdf, grad_sdf = head_sdf(head, points, with_grad=True)
    inside = sdf < 0
    value = float(np.sum(np.where(inside, -sdf, 0.0)) / norm)
    g = np.where(inside[..., None], -grad_sdf, 0.0) / norm
    if isinstance(full_shape, HairMap):
        full = np.zeros_like(full_shape.points)
        full[full_shape.active] = g
        return value, full
    return value, g


@dataclass
class RealLoss:
    """Weighted rendering-based loss with its gradients.

    ``grad_*`` are gradients of ``total`` w.r.t. the render buffers and
    ``grad_points`` w.r.t. the hair points (penetration term only).
    """

    total: float
    terms: dict
    grad_sil: np.ndarray = field(repr=False)
    grad_dir: np.ndarray = field(repr=False)
    grad_depth: np.ndarray = field(repr=False)
    grad_points: np.ndarray = field(repr=False)


def combine_real(seg, dirmap, pen, depth, weights: LossWeights, include_depth=True) -> float:
    total = weights.lambda_seg * seg + weights.lambda_dirmap * dirmap + weights.lambda_pen * pen
    if include_depth:
        total += weights.lambda_depth * depth
    return total


def real_loss(render: RenderBuffers, hair: HairMap, target: TargetMaps, head: HeadModel,
              weights: LossWeights = INVERSION_WEIGHTS, include_depth: bool = True) -> RealLoss:
    seg, g_sil = seg_loss(render, target)
    dm, g_dir = dirmap_loss(render, target)
    pen, g_pts = pen_loss(hair, head)
    dep, g_dep = depth_loss(render, target) if include_depth else (0.0, np.zeros_like(render.depth))
    total = combine_real(seg, dm, pen, dep, weights, include_depth)
    lam_depth = weights.lambda_depth if include_depth else 0.0
    return RealLoss(
        total=total,
        terms={"seg": seg, "dirmap": dm, "pen": pen, "depth": dep},
        grad_sil=weights.lambda_seg * g_sil,
        grad_dir=weights.lambda_dirmap * g_dir,
        grad_depth=lam_depth * g_dep,
        grad_points=weights.lambda_pen * g_pts,
    )


def hybrid_loss(synth_term: float, real_term: float, r: float = 0.5) -> float:
    return synth_term + r * real_term


# --- metrics ----------------------------------------------------------------


def undirected_angle(a, b) -> np.ndarray:
    """Angle between 2D lines in [0, pi/2], treating ``v`` and ``-v`` as equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(np.abs(cross), np.abs(dot))


def undir_metric(render_dirs, gabor_dirs, mask=None) -> float:
    """Mean undirected orientation error over ``mask`` pixels where both vectors are non-zero."""
    a = np.asarray(render_dirs, dtype=np.float64)
    b = np.asarray(gabor_dirs, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("direction fields differ in shape")
    valid = (np.linalg.norm(a, axis=-1) > 0) & (np.linalg.norm(b, axis=-1) > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DegenerateInputError("orientation metric undefined on an empty mask")
    # correctly rounded sum keeps exact per-pixel values (0, pi/2) exact in the mean
    return math.fsum(undirected_angle(a[valid], b[valid])) / int(valid.sum())
