"""AdamW, the coarse-to-fine hair-map fitting loop, and evaluation metrics."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .codec import COARSE_COMPONENTS, StrandBasis
from .errors import DivergenceError, ShapeError
from .hairmap import BALD_THRESHOLD, NEAREST_WEIGHT, PcaHairMap, RootGrid, root_grid, upsample_matrix
from .losses import (
    INVERSION_WEIGHTS,
    LossWeights,
    TargetMaps,
    combine_real,
    depth_loss,
    dirmap_loss,
    pen_loss_points,
    seg_loss,
    undir_metric,
)
from .render import RenderBuffers, RenderConfig, build_splats, rasterize, rasterize_backward
from .scalp import CameraModel, HeadModel

logger = logging.getLogger(__name__)

RAW_LR = 1e-4
NO_PRIOR_LR = 1e-5


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    # per-entry update counts, so entries frozen for a while get correct bias correction
    step: np.ndarray | None = None


def adamw_step(state: AdamWState, params, grads, mask=None) -> np.ndarray:
    """One AdamW update; entries where ``mask`` is False are left untouched."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} differ")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
        state.step = np.zeros(params.shape, dtype=np.int64)
    elif state.m.shape != params.shape:
        raise ShapeError("optimizer state does not match parameter shape")
    upd = np.ones(params.shape, dtype=bool) if mask is None else np.broadcast_to(mask, params.shape)

    step = state.step + upd
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    t = np.maximum(step, 1)
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params * (1 - state.lr * state.weight_decay)
    new = new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    state.m = np.where(upd, m, state.m)
    state.v = np.where(upd, v, state.v)
    state.step = step
    return np.where(upd, new, params)


@dataclass(frozen=True)
class FitSchedule:
    total_steps: int = 400
    coarse_steps: int = 20
    coarse_components: int = COARSE_COMPONENTS
    weights: LossWeights = INVERSION_WEIGHTS
    upsample: tuple | None = (256, 256)
    nearest_weight: float = NEAREST_WEIGHT
    random_views: bool = True
    lr: float = 0.02
    weight_decay: float = 0.001
    whiten: bool = True
    include_depth: bool = True
    optimize_baldness: bool = False
    bald_threshold: float = BALD_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.coarse_steps <= self.total_steps:
            raise ValueError("coarse_steps must lie in [0, total_steps]")
        if self.coarse_components < 0:
            raise ValueError("coarse_components must be non-negative")


@dataclass
class FitReport:
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    aborted: bool = False

    COLUMNS = ("step", "view", "seg", "dirmap", "depth", "pen", "total")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([row[c] if c in ("step", "view") else repr(float(row[c])) for c in self.COLUMNS])

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.rows])


class _HairModel:
    """Differentiable map from (whitened) coefficients of active guide texels to dense world strands."""

    def __init__(self, basis: StrandBasis, roots: RootGrid, active, upsample, nearest_weight):
        self.basis = basis
        A, offset = basis.point_matrix()
        L = basis.L
        # re-anchor: subtract point 0 from every point
        A = A.reshape(L, 3, -1)
        offset = offset.reshape(L, 3)
        self.A = (A - A[:1]).reshape(L * 3, -1)
        self.offset = (offset - offset[:1]).reshape(-1)
        self.L = L
        self.active = np.asarray(active, dtype=bool)
        self.guide_frames = roots.frames[self.active]
        self.guide_roots = roots.positions[self.active]
        if upsample is not None and tuple(upsample) != roots.shape:
            mat, out_active = upsample_matrix(self.active, upsample, nearest_weight)
            cols = np.flatnonzero(self.active.ravel())
            rows = np.flatnonzero(out_active.ravel())
            self.W = mat[rows][:, cols].tocsr()
            dense = root_grid(roots.head, *upsample)
            self.frames = dense.frames[out_active]
            self.positions = dense.positions[out_active]
            self.shape = tuple(upsample)
        else:
            self.W = None
            self.frames = self.guide_frames
            self.positions = self.guide_roots
            self.shape = roots.shape
        self.scale = basis.stddev.copy()
        self.scale[self.scale <= 0] = 1.0

    def forward(self, coeffs) -> np.ndarray:
        local = (coeffs @ self.A.T + self.offset).reshape(-1, self.L, 3)
        if self.W is not None:
            local = (self.W @ local.reshape(local.shape[0], -1)).reshape(-1, self.L, 3)
        return np.einsum("nij,nlj->nli", self.frames, local) + self.positions[:, None, :]

    def backward(self, grad_world) -> np.ndarray:
        g_local = np.einsum("nji,nlj->nli", self.frames, grad_world).reshape(grad_world.shape[0], -1)
        if self.W is not None:
            g_local = self.W.T @ g_local
        return g_local @ self.A

    @property
    def num_points_total(self) -> int:
        return self.shape[0] * self.shape[1] * self.L


def _render_view(model: _HairModel, coeffs, cam, config, opacity=None):
    strands = model.forward(coeffs)
    splats = build_splats(strands, config)
    if opacity is not None:
        splats = _with_strand_opacity(splats, opacity)
    return strands, rasterize(splats, cam, config)


def _with_strand_opacity(splats, opacity):
    from dataclasses import replace

    return replace(splats, opacity=np.asarray(opacity)[splats.source[:, 0]])


def fit_hairmap(init: PcaHairMap, basis: StrandBasis, roots: RootGrid, head: HeadModel, views,
                schedule: FitSchedule = FitSchedule(), config: RenderConfig = RenderConfig(), callback=None,
                monitor=None):
    """Fit a PCA hair map to one or more ``(camera, targets)`` views by gradient descent.

    Returns ``(fitted_map, report)``. During the first ``coarse_steps`` only the
    leading ``coarse_components`` coefficients are updated. Raises
    :class:`DivergenceError` (carrying the partial report) on a non-finite loss.

    ``callback(row)`` receives each report row; ``monitor(step, current)`` is
    called after each update with a zero-argument function returning the
    current map.
    """
    views = list(views)
    if not views:
        raise ValueError("need at least one view")
    if init.num_components != basis.num_components:
        raise ShapeError("initial map and basis disagree on num_components")
    if roots.shape != (init.height, init.width):
        raise ShapeError("root grid does not match the hair map")
    if schedule.coarse_components > basis.num_components:
        raise ValueError("coarse_components exceeds num_components")

    start = time.perf_counter()
    rng = np.random.default_rng(schedule.seed)
    bald = init.baldness.copy()
    active = bald > 0 if schedule.optimize_baldness else init.active(schedule.bald_threshold)
    model = _HairModel(basis, roots, active, schedule.upsample, schedule.nearest_weight)
    scale = model.scale if schedule.whiten else np.ones(basis.num_components)
    params = init.coeffs[active] / scale
    bald_params = bald[active].copy()
    state = AdamWState(lr=schedule.lr, weight_decay=schedule.weight_decay)
    bald_state = AdamWState(lr=schedule.lr, weight_decay=0.0)
    coarse_mask = np.arange(basis.num_components) < schedule.coarse_components
    report = FitReport()
    W = schedule.weights

    for step in range(schedule.total_steps):
        if schedule.random_views and len(views) > 1:
            chosen = [int(rng.integers(len(views)))]
        else:
            chosen = list(range(len(views)))
        coeffs = params * scale
        grad = np.zeros_like(params)
        g_bald = np.zeros_like(bald_params)
        terms = {"seg": 0.0, "dirmap": 0.0, "depth": 0.0, "pen": 0.0}
        total = 0.0
        for vi in chosen:
            cam, target = views[vi]
            opacity = config.opacity * np.clip(bald_params, 0, 1) if schedule.optimize_baldness else None
            opacity_dense = opacity if opacity is None or model.W is None else np.clip(model.W @ opacity, 0, 1)
            strands, buffers = _render_view(model, coeffs, cam, config, opacity_dense)
            seg, g_sil = seg_loss(buffers, target)
            dm, g_dir = dirmap_loss(buffers, target)
            dep, g_dep = depth_loss(buffers, target) if schedule.include_depth else (0.0, None)
            pen, g_pen = pen_loss_points(strands, head, norm=model.num_points_total)
            value = combine_real(seg, dm, pen, dep, W, schedule.include_depth)
            lam_depth = W.lambda_depth if schedule.include_depth else 0.0
            g_depth_buf = None if g_dep is None else lam_depth * g_dep
            if buffers.contributors is not None:
                out = rasterize_backward(buffers, W.lambda_seg * g_sil, W.lambda_dirmap * g_dir, g_depth_buf,
                                         return_opacity=schedule.optimize_baldness)
                if schedule.optimize_baldness:
                    g_pts, g_splat = out
                    # splat opacity = config.opacity * strand baldness
                    source = buffers.contributors.splats.source[:, 0]
                    g_op = np.bincount(source, weights=g_splat, minlength=model.positions.shape[0])
                    g_guide = g_op if model.W is None else model.W.T @ g_op
                    g_bald += config.opacity * g_guide
                else:
                    g_pts = out
            else:
                g_pts = np.zeros_like(strands)
            g_pts = g_pts + W.lambda_pen * g_pen
            grad += model.backward(g_pts) * scale
            total += value
            for key, val in zip(("seg", "dirmap", "depth", "pen"), (seg, dm, dep, pen)):
                terms[key] += val
        n = len(chosen)
        total /= n
        grad /= n
        row = {"step": step, "view": chosen[0] if n == 1 else -1, **{k: v / n for k, v in terms.items()}, "total": total}
        report.rows.append(row)
        if callback is not None:
            callback(row)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            report.aborted = True
            report.wall_time = time.perf_counter() - start
            raise DivergenceError(f"non-finite loss at step {step}", report)
        mask = coarse_mask[None, :] if step < schedule.coarse_steps else None
        params = adamw_step(state, params, grad, mask)
        if schedule.optimize_baldness:
            bald_params = np.clip(adamw_step(bald_state, bald_params, g_bald / n), 0.0, 1.0)
        if monitor is not None:
            monitor(step, lambda: _assemble(init, active, params, scale, state, bald, bald_params, schedule))

    fitted = _assemble(init, active, params, scale, state, bald, bald_params, schedule)
    report.final = evaluate_views(fitted, basis, roots, views, schedule, config)
    report.wall_time = time.perf_counter() - start
    return fitted, report


def _assemble(init, active, params, scale, state, bald, bald_params, schedule) -> PcaHairMap:
    coeffs = init.coeffs.copy()
    if state.step is not None:
        # entries the optimizer never touched keep their exact initial values
        touched = state.step > 0
        cur = coeffs[active]
        cur[touched] = (params * scale)[touched]
        coeffs[active] = cur
    bald = bald.copy()
    if schedule.optimize_baldness:
        bald[active] = bald_params
    return PcaHairMap(coeffs, bald)


def evaluate_views(pca: PcaHairMap, basis, roots, views, schedule: FitSchedule, config: RenderConfig) -> dict:
    """Mean IoU / undirected-orientation / depth metrics of ``pca`` over ``views``."""
    active = pca.baldness > 0 if schedule.optimize_baldness else pca.active(schedule.bald_threshold)
    model = _HairModel(basis, roots, active, schedule.upsample, schedule.nearest_weight)
    metrics = []
    for cam, target in views:
        _, buffers = _render_view(model, pca.coeffs[active], cam, config)
        metrics.append(eval_metrics(buffers, target))
    arr = np.array(metrics, dtype=np.float64)
    return {"iou": float(arr[:, 0].mean()), "undir": float(np.nanmean(arr[:, 1])), "depth_l1": float(arr[:, 2].mean())}


def eval_metrics(render: RenderBuffers, target: TargetMaps, threshold: float = 0.5):
    """``(IoU, L_undir, depth L1)`` between a render and its targets."""
    pred = render.silhouette > threshold
    gt = target.silhouette > threshold
    union = np.logical_or(pred, gt).sum()
    iou = 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)
    both = pred & gt
    try:
        undir = undir_metric(render.direction, target.direction, both)
    except ValueError:
        undir = float("nan")
    depth, _ = depth_loss(render, target)
    return iou, undir, depth


def strand_tangents(strands) -> np.ndarray:
    strands = np.asarray(strands, dtype=np.float64)
    tan = np.gradient(strands, axis=-2)
    norm = np.linalg.norm(tan, axis=-1, keepdims=True)
    return tan / np.where(norm > 0, norm, 1.0)


def _nearest(a, b, brute_limit=2000):
    if len(a) <= brute_limit and len(b) <= brute_limit:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(len(a)), idx], idx
    dist, idx = cKDTree(b).query(a)
    return dist**2, idx


def chamfer_eval(pred_strands, gt_strands, samples: int = 10_000, seed: int = 0):
    """Symmetric chamfer on sampled strand points: mean squared distance and mean ``1 - |cos|``."""
    pred = np.asarray(pred_strands, dtype=np.float64)
    gt = np.asarray(gt_strands, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise ValueError("chamfer needs non-empty strand sets")
    rng = np.random.default_rng(seed)

    def sample(strands):
        pts = strands.reshape(-1, 3)
        tan = strand_tangents(strands).reshape(-1, 3)
        if len(pts) > samples:
            pick = np.sort(rng.choice(len(pts), samples, replace=False))
            pts, tan = pts[pick], tan[pick]
        return pts, tan

    pa, ta = sample(pred)
    pb, tb = sample(gt)
    d_ab, i_ab = _nearest(pa, pb)
    d_ba, i_ba = _nearest(pb, pa)
    pts = 0.5 * (d_ab.mean() + d_ba.mean())
    ang_ab = np.maximum(1.0 - np.abs(np.sum(ta * tb[i_ab], axis=1)), 0.0)
    ang_ba = np.maximum(1.0 - np.abs(np.sum(tb * ta[i_ba], axis=1)), 0.0)
    return float(pts), float(0.5 * (ang_ab.mean() + ang_ba.mean()))


def schedule_dict(schedule: FitSchedule) -> dict:
    return asdict(schedule)
