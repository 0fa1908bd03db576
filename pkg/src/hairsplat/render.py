"""Differentiable rasterisation of strand segments as line-constrained 3D Gaussians.

Every segment ``(p_j, p_{j+1})`` becomes a Gaussian with mean at the segment
midpoint and covariance ``(E D)(E D)^T`` where ``E = [b, t, n]`` is an
orthonormal frame whose first axis is the segment direction and
``D = diag(width_scale * |v|, eps, eps)``. Splats are projected with the
first-order (EWA) perspective approximation plus a ``blur`` low-pass term and
alpha-composited front to back.

Buffers: ``silhouette`` is the accumulated alpha; ``direction`` and ``depth``
are alpha-weighted composites divided by the accumulated alpha (so directions
have norm <= 1 and depth is a weighted mean of camera-space splat depths).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import DEGENERATE_SEGMENT
from .errors import InvalidInputError, StateError
from .scalp import CameraModel

_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class RenderConfig:
    width_scale: float = 0.5
    epsilon: float = 0.005
    opacity: float = 0.95
    cutoff: float = 3.0
    blur: float = 0.3  # pixels^2 added to the projected covariance diagonal

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        if not 0 < self.opacity <= 1:
            raise InvalidInputError("opacity must lie in (0, 1]")
        if self.width_scale <= 0 or self.cutoff <= 0 or self.blur < 0:
            raise InvalidInputError("width_scale and cutoff must be positive, blur non-negative")


@dataclass(frozen=True)
class StrandSplats:
    means: np.ndarray  # (N, 3)
    segments: np.ndarray  # (N, 3) segment vectors v = p_{j+1} - p_j
    covariances: np.ndarray  # (N, 3, 3)
    directions: np.ndarray  # (N, 3) unit tangents
    frames: np.ndarray  # (N, 3, 3) columns b, t, n
    source: np.ndarray  # (N, 2) (strand index, segment index)
    num_points: int = 0
    num_strands: int = 0
    skipped: int = 0
    opacity: np.ndarray | None = None  # optional per-splat opacity overriding the config

    def __len__(self):
        return self.means.shape[0]


def complete_frame(b) -> np.ndarray:
    """Deterministic orthonormal completion ``(b, t, n)`` of unit vectors ``b``."""
    b = np.asarray(b, dtype=np.float64)
    t = np.cross(b, np.array([0.0, 0.0, 1.0]))
    small = np.linalg.norm(t, axis=-1) < 1e-6
    if small.any():
        t[small] = np.cross(b[small], np.array([1.0, 0.0, 0.0]))
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    n = np.cross(b, t)
    return np.stack([b, t, n], axis=-1)


def build_splats(strands, config: RenderConfig) -> StrandSplats:
    """One splat per non-degenerate segment of ``strands`` (shape ``(n, L, 3)``)."""
    strands = np.asarray(strands, dtype=np.float64)
    if strands.ndim == 2:
        strands = strands[None]
    n, L, _ = strands.shape
    v = np.diff(strands, axis=1).reshape(-1, 3)
    mid = (0.5 * (strands[:, 1:] + strands[:, :-1])).reshape(-1, 3)
    src = np.stack(np.meshgrid(np.arange(n), np.arange(L - 1), indexing="ij"), axis=-1).reshape(-1, 2)
    length = np.linalg.norm(v, axis=1)
    keep = length >= DEGENERATE_SEGMENT
    v, mid, src, length = v[keep], mid[keep], src[keep], length[keep]
    b = v / length[:, None]
    E = complete_frame(b)
    scale = np.stack(
        [config.width_scale * length, np.full_like(length, config.epsilon), np.full_like(length, config.epsilon)],
        axis=-1,
    )
    ED = E * scale[:, None, :]
    cov = ED @ np.transpose(ED, (0, 2, 1))
    return StrandSplats(
        means=mid,
        segments=v,
        covariances=cov,
        directions=b,
        frames=E,
        source=src,
        num_points=L,
        num_strands=n,
        skipped=int((~keep).sum()),
    )


@dataclass
class _Projection:
    t: np.ndarray  # camera-space means (N, 3)
    M: np.ndarray  # J R, (N, 2, 3)
    u: np.ndarray  # M v, (N, 2)
    kappa: np.ndarray  # ws^2 - eps^2 / |v|^2
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 2, 2)
    mean2d: np.ndarray  # (N, 2)
    dir2d: np.ndarray  # (N, 2) normalized screen tangent
    unorm: np.ndarray  # |u|
    valid: np.ndarray  # (N,)


def _project_splats(splats: StrandSplats, cam: CameraModel, config: RenderConfig) -> _Projection:
    R = cam.R
    t = splats.means @ R.T + cam.t
    valid = t[:, 2] > cam.near
    tz = np.where(valid, t[:, 2], 1.0)
    a = cam.fx / tz
    b = -cam.fx * t[:, 0] / tz**2
    c = cam.fy / tz
    e = -cam.fy * t[:, 1] / tz**2
    M = np.empty((len(splats), 2, 3))
    M[:, 0] = a[:, None] * R[0] + b[:, None] * R[2]
    M[:, 1] = c[:, None] * R[1] + e[:, None] * R[2]
    v = splats.segments
    r2 = np.sum(v * v, axis=1)
    kappa = config.width_scale**2 - config.epsilon**2 / r2
    u = np.einsum("nij,nj->ni", M, v)
    cov2d = kappa[:, None, None] * u[:, :, None] * u[:, None, :]
    cov2d += config.epsilon**2 * M @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += config.blur
    cov2d[:, 1, 1] += config.blur
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det
    mean2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1)
    unorm = np.linalg.norm(u, axis=1)
    dir2d = np.where(unorm[:, None] > 0, u / np.where(unorm > 0, unorm, 1.0)[:, None], 0.0)
    valid &= np.isfinite(det) & (det > 0)
    return _Projection(t, M, u, kappa, cov2d, conic, mean2d, dir2d, unorm, valid)


@dataclass
class Contributors:
    """Per-pixel contributor lists, flattened and grouped by pixel in depth order."""

    pixel: np.ndarray  # flat pixel index per (splat, pixel) pair
    splat: np.ndarray  # splat index per pair
    delta: np.ndarray  # pixel - mean2d, (P, 2)
    alpha: np.ndarray
    trans: np.ndarray  # transmittance before this pair's contribution
    group: np.ndarray  # pixel-group id per pair
    starts: np.ndarray  # first pair index of each group
    proj: _Projection
    splats: StrandSplats
    features: np.ndarray  # (P, 4): 1, dir x, dir y, depth
    cam: CameraModel
    config: RenderConfig
    falloff: np.ndarray  # exp(-m^2 / 2) per pair


@dataclass
class RenderBuffers:
    silhouette: np.ndarray  # (H, W)
    direction: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W); 0 where undefined
    depth_valid: np.ndarray  # (H, W) bool, silhouette > 0
    composite: np.ndarray = field(default=None, repr=False)  # (H, W, 4) raw weighted sums
    contributors: Contributors | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.silhouette.shape


def _empty_buffers(cam: CameraModel) -> RenderBuffers:
    H, W = cam.height, cam.width
    return RenderBuffers(
        silhouette=np.zeros((H, W)),
        direction=np.zeros((H, W, 2)),
        depth=np.zeros((H, W)),
        depth_valid=np.zeros((H, W), dtype=bool),
        composite=np.zeros((H, W, 4)),
    )


def _resolve(composite: np.ndarray):
    s = composite[..., 0]
    has = s > 0
    inv = np.where(has, 1.0 / np.where(has, s, 1.0), 0.0)
    direction = composite[..., 1:3] * inv[..., None]
    depth = composite[..., 3] * inv
    return s, direction, depth, has


def _enumerate_pairs(proj: _Projection, order: np.ndarray, cam: CameraModel, cutoff: float):
    """All (splat, pixel) pairs inside each splat's cutoff ellipse, in ``order``."""
    W, H = cam.width, cam.height
    mx, my = proj.mean2d[order, 0], proj.mean2d[order, 1]
    hx = cutoff * np.sqrt(proj.cov2d[order, 0, 0])
    hy = cutoff * np.sqrt(proj.cov2d[order, 1, 1])
    x0 = np.maximum(np.ceil(mx - hx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mx + hx), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(my - hy), 0).astype(np.int64)
    y1 = np.minimum(np.floor(my + hy), H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    sid = np.repeat(order, counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    px = np.repeat(x0, counts) + offs % np.maximum(nxr, 1)
    py = np.repeat(y0, counts) + offs // np.maximum(nxr, 1)
    delta = np.stack([px - proj.mean2d[sid, 0], py - proj.mean2d[sid, 1]], axis=1)
    Q = proj.conic[sid]
    m2 = Q[:, 0, 0] * delta[:, 0] ** 2 + 2 * Q[:, 0, 1] * delta[:, 0] * delta[:, 1] + Q[:, 1, 1] * delta[:, 1] ** 2
    inside = m2 <= cutoff * cutoff
    return sid[inside], (py * W + px)[inside], delta[inside], m2[inside]


def depth_order(proj: _Projection) -> np.ndarray:
    """Valid splat indices sorted front to back, ties broken by index."""
    idx = np.flatnonzero(proj.valid)
    return idx[np.lexsort((idx, proj.t[idx, 2]))]


def rasterize(splats: StrandSplats, cam: CameraModel, config: RenderConfig, retain: bool = True) -> RenderBuffers:
    if len(splats) == 0:
        return _empty_buffers(cam)
    proj = _project_splats(splats, cam, config)
    order = depth_order(proj)
    sid, pix, delta, m2 = _enumerate_pairs(proj, order, cam, config.cutoff)
    if sid.size == 0:
        return _empty_buffers(cam)
    # stable sort by pixel keeps the depth order inside each pixel
    perm = np.argsort(pix, kind="stable")
    sid, pix, delta, m2 = sid[perm], pix[perm], delta[perm], m2[perm]
    base_opacity = config.opacity if splats.opacity is None else splats.opacity[sid]
    falloff = np.exp(-0.5 * m2)
    alpha = base_opacity * falloff

    new_group = np.empty(pix.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = pix[1:] != pix[:-1]
    starts = np.flatnonzero(new_group)
    group = np.cumsum(new_group) - 1

    log1m = np.log(np.maximum(1.0 - alpha, _LOG_FLOOR))
    csum = np.cumsum(log1m)
    base = csum[starts] - log1m[starts]
    trans = np.exp(csum - log1m - base[group])

    weight = alpha * trans
    features = np.column_stack([np.ones_like(alpha), proj.dir2d[sid], proj.t[sid, 2]])
    npix = cam.width * cam.height
    composite = np.stack(
        [np.bincount(pix, weights=weight * features[:, c], minlength=npix) for c in range(4)], axis=-1
    ).reshape(cam.height, cam.width, 4)
    s, direction, depth, has = _resolve(composite)
    ctx = None
    if retain:
        ctx = Contributors(pix, sid, delta, alpha, trans, group, starts, proj, splats, features, cam, config, falloff)
    return RenderBuffers(s, direction, depth, has, composite, ctx)


def _buffer_grads_to_composite(buffers: RenderBuffers, grad_sil, grad_dir, grad_depth) -> np.ndarray:
    H, W = buffers.shape
    grad_sil = np.zeros((H, W)) if grad_sil is None else np.asarray(grad_sil, dtype=np.float64)
    grad_dir = np.zeros((H, W, 2)) if grad_dir is None else np.asarray(grad_dir, dtype=np.float64)
    grad_depth = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    s = buffers.composite[..., 0]
    has = s > 0
    inv = np.where(has, 1.0 / np.where(has, s, 1.0), 0.0)
    g = np.zeros((H, W, 4))
    g[..., 1:3] = grad_dir * inv[..., None]
    g[..., 3] = grad_depth * inv
    g[..., 0] = grad_sil - inv * (np.sum(grad_dir * buffers.direction, axis=-1) + grad_depth * buffers.depth)
    return g.reshape(-1, 4)


def rasterize_backward(buffers: RenderBuffers, grad_sil=None, grad_dir=None, grad_depth=None,
                       return_opacity: bool = False):
    """Gradient of a scalar loss w.r.t. the strand points that produced ``buffers``.

    ``grad_*`` are the loss gradients w.r.t. each output buffer. Returns an
    array shaped like the strands passed to :func:`build_splats`. The depth
    order is treated as fixed. With ``return_opacity`` the gradient w.r.t.
    each splat's base opacity is returned as a second value.
    """
    ctx = buffers.contributors
    if ctx is None:
        if buffers.composite is not None and not buffers.composite.any():
            raise StateError("buffers hold no contributors (empty render); nothing to differentiate")
        raise StateError("buffers were rendered without contributor lists")
    splats, proj = ctx.splats, ctx.proj
    gF = _buffer_grads_to_composite(buffers, grad_sil, grad_dir, grad_depth)[ctx.pixel]
    val = np.sum(gF * ctx.features, axis=1)
    wv = ctx.alpha * ctx.trans * val
    csum = np.cumsum(wv)
    base = csum[ctx.starts] - wv[ctx.starts]
    incl = csum - base[ctx.group]
    ends = np.append(ctx.starts[1:], wv.size) - 1
    suffix = incl[ends][ctx.group] - incl
    one_minus = np.maximum(1.0 - ctx.alpha, _LOG_FLOOR)
    g_alpha = ctx.trans * val - suffix / one_minus
    g_feat = (ctx.alpha * ctx.trans)[:, None] * gF

    g_m2 = -0.5 * ctx.alpha * g_alpha
    dx, dy = ctx.delta[:, 0], ctx.delta[:, 1]
    Q = proj.conic[ctx.splat]
    N = len(splats)
    sid = ctx.splat

    def acc(w):
        return np.bincount(sid, weights=w, minlength=N)

    qd0 = Q[:, 0, 0] * dx + Q[:, 0, 1] * dy
    qd1 = Q[:, 1, 0] * dx + Q[:, 1, 1] * dy
    g_mean2d = np.stack([acc(-2.0 * qd0 * g_m2), acc(-2.0 * qd1 * g_m2)], axis=1)
    gQ = np.empty((N, 2, 2))
    gQ[:, 0, 0] = acc(dx * dx * g_m2)
    gQ[:, 0, 1] = gQ[:, 1, 0] = acc(dx * dy * g_m2)
    gQ[:, 1, 1] = acc(dy * dy * g_m2)
    g_dir = np.stack([acc(g_feat[:, 1]), acc(g_feat[:, 2])], axis=1)
    g_z = acc(g_feat[:, 3])

    conic = proj.conic
    g_cov = -conic @ gQ @ conic
    grads = _splat_grads_to_points(splats, proj, ctx.cam, ctx.config, g_cov, g_mean2d, g_dir, g_z)
    if not return_opacity:
        return grads
    g_opacity = acc(g_alpha * ctx.falloff)
    return grads, g_opacity


def _splat_grads_to_points(splats, proj, cam, config, g_cov, g_mean2d, g_dir, g_z) -> np.ndarray:
    eps2 = config.epsilon**2
    M, u, v, kappa = proj.M, proj.u, splats.segments, proj.kappa
    ok = proj.valid
    # d cov2d = kappa (du u^T + u du^T) + u u^T dkappa + eps^2 (dM M^T + M dM^T)
    g_u = 2.0 * kappa[:, None] * np.einsum("nij,nj->ni", g_cov, u)
    g_kappa = np.einsum("ni,nij,nj->n", u, g_cov, u)
    g_M = 2.0 * eps2 * g_cov @ M
    unorm = np.where(proj.unorm > 0, proj.unorm, 1.0)
    d = proj.dir2d
    g_u += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / unorm[:, None]
    g_M += g_u[:, :, None] * v[:, None, :]
    g_v = np.einsum("nij,ni->nj", M, g_u)
    r2 = np.sum(v * v, axis=1)
    g_v += (g_kappa * 2.0 * eps2 / r2**2)[:, None] * v

    R = cam.R
    fx, fy = cam.fx, cam.fy
    t = proj.t
    tz = np.where(ok, t[:, 2], 1.0)
    g_J = g_M @ R.T  # (N, 2, 3)
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_J[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] = g_J[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] = (
        g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 0, 2] * (2 * fx * t[:, 0] / tz**3)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 1, 2] * (2 * fy * t[:, 1] / tz**3)
    )
    # mean2d Jacobian w.r.t. t is J itself
    g_t[:, 0] += g_mean2d[:, 0] * fx / tz
    g_t[:, 1] += g_mean2d[:, 1] * fy / tz
    g_t[:, 2] += -g_mean2d[:, 0] * fx * t[:, 0] / tz**2 - g_mean2d[:, 1] * fy * t[:, 1] / tz**2
    g_t[:, 2] += g_z
    g_mu = g_t @ R
    g_mu[~ok] = 0.0
    g_v[~ok] = 0.0

    grads = np.zeros((splats.num_strands, splats.num_points, 3))
    s, j = splats.source[:, 0], splats.source[:, 1]
    np.add.at(grads, (s, j), 0.5 * g_mu - g_v)
    np.add.at(grads, (s, j + 1), 0.5 * g_mu + g_v)
    return grads


def reference_rasterize(splats: StrandSplats, cam: CameraModel, config: RenderConfig) -> RenderBuffers:
    """Brute-force renderer: every splat evaluated at every pixel, full per-pixel sort.

    Uses the explicit ``J R C R^T J^T`` covariance projection and plain
    cumulative products; shares no compositing code with :func:`rasterize`.
    """
    H, W = cam.height, cam.width
    out = _empty_buffers(cam)
    if len(splats) == 0:
        return out
    means = []
    covs = []
    dirs = []
    depths = []
    keys = []
    opac = []
    for i in range(len(splats)):
        pc = cam.R @ splats.means[i] + cam.t
        if pc[2] <= cam.near:
            continue
        x, y, z = pc
        J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
        cov = J @ cam.R @ splats.covariances[i] @ cam.R.T @ J.T + config.blur * np.eye(2)
        tangent = J @ cam.R @ splats.directions[i]
        norm = np.linalg.norm(tangent)
        means.append([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        covs.append(np.linalg.inv(cov))
        dirs.append(tangent / norm if norm > 0 else np.zeros(2))
        depths.append(z)
        keys.append(i)
        opac.append(config.opacity if splats.opacity is None else splats.opacity[i])
    if not keys:
        return out
    means = np.array(means)
    inv = np.array(covs)
    dirs = np.array(dirs)
    depths = np.array(depths)
    keys = np.array(keys)
    opac = np.array(opac, dtype=np.float64)
    order = np.lexsort((keys, depths))
    means, inv, dirs, depths, opac = means[order], inv[order], dirs[order], depths[order], opac[order]
    cut2 = config.cutoff**2
    for py in range(H):
        for px in range(W):
            d = np.array([px, py], dtype=np.float64) - means
            m2 = np.einsum("ni,nij,nj->n", d, inv, d)
            hit = m2 <= cut2
            if not hit.any():
                continue
            a = opac[hit] * np.exp(-0.5 * m2[hit])
            T = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
            w = a * T
            s = 1.0 - np.prod(1.0 - a)
            out.silhouette[py, px] = s
            out.composite[py, px] = [w.sum(), *(w @ dirs[hit]), w @ depths[hit]]
            if s > 0:
                out.direction[py, px] = (w @ dirs[hit]) / w.sum()
                out.depth[py, px] = (w @ depths[hit]) / w.sum()
                out.depth_valid[py, px] = True
    return out


VISIBLE_WEIGHT = 3.0
HIDDEN_WEIGHT = 1.0


def point_visibility(strands, cam: CameraModel, config: RenderConfig, min_transmittance: float = 0.5) -> np.ndarray:
    """Boolean ``(n, L)`` visibility of strand points.

    A point is visible when it projects inside the image and one of its
    adjacent segments' splats contributes at the point's nearest pixel with
    transmittance (before its own contribution) of at least
    ``min_transmittance``.
    """
    strands = np.asarray(strands, dtype=np.float64)
    n, L, _ = strands.shape
    splats = build_splats(strands, config)
    visible = np.zeros((n, L), dtype=bool)
    if len(splats) == 0:
        return visible
    buffers = rasterize(splats, cam, config)
    ctx = buffers.contributors
    if ctx is None:
        return visible
    seg2splat = np.full((n, L - 1), -1, dtype=np.int64)
    seg2splat[splats.source[:, 0], splats.source[:, 1]] = np.arange(len(splats))

    N = len(splats)
    keys = ctx.pixel.astype(np.int64) * N + ctx.splat
    order = np.argsort(keys)
    keys, trans = keys[order], ctx.trans[order]

    pc = strands @ cam.R.T + cam.t
    infront = pc[..., 2] > cam.near
    z = np.where(infront, pc[..., 2], 1.0)
    px = np.rint(cam.fx * pc[..., 0] / z + cam.cx).astype(np.int64)
    py = np.rint(cam.fy * pc[..., 1] / z + cam.cy).astype(np.int64)
    inside = infront & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    pixel = py * cam.width + px

    for shift in (-1, 0):
        seg = np.arange(L) + shift
        ok = (seg >= 0) & (seg < L - 1)
        cand = np.full((n, L), -1, dtype=np.int64)
        cand[:, ok] = seg2splat[:, seg[ok]]
        query = inside & (cand >= 0)
        q = pixel[query] * N + cand[query]
        pos = np.clip(np.searchsorted(keys, q), 0, keys.size - 1)
        hit = (keys[pos] == q) & (trans[pos] >= min_transmittance)
        vis = np.zeros(int(query.sum()), dtype=bool)
        vis[hit] = True
        visible[query] |= vis
    return visible


def visibility_weights(hair, cam: CameraModel, config: RenderConfig) -> np.ndarray:
    """Per-point weights: 3 for camera-visible points, 1 otherwise.

    ``hair`` may be a :class:`~hairsplat.hairmap.HairMap` (result shaped
    ``(H, W, L)``) or a strand array ``(n, L, 3)``.
    """
    if hasattr(hair, "active"):
        weights = np.full(hair.points.shape[:-1], HIDDEN_WEIGHT)
        if hair.active.any():
            vis = point_visibility(hair.strands(), cam, config)
            weights[hair.active] = np.where(vis, VISIBLE_WEIGHT, HIDDEN_WEIGHT)
        return weights
    vis = point_visibility(hair, cam, config)
    return np.where(vis, VISIBLE_WEIGHT, HIDDEN_WEIGHT)
