"""Texture-space hairstyles: PCA hair maps, decoded strand maps and guide upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .codec import StrandBasis, decode_strand, encode_strand
from .errors import InvalidInputError, ShapeError
from .scalp import HeadModel, scalp_point

BALD_THRESHOLD = 0.5
NEAREST_WEIGHT = 0.5


@dataclass(frozen=True)
class PcaHairMap:
    coeffs: np.ndarray  # (H, W, C)
    baldness: np.ndarray  # (H, W), 1 = hair present

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        bald = np.asarray(self.baldness, dtype=np.float64)
        if coeffs.ndim != 3 or bald.shape != coeffs.shape[:2]:
            raise ShapeError(f"coeffs {coeffs.shape} and baldness {bald.shape} disagree")
        if not (np.all(np.isfinite(coeffs)) and np.all(np.isfinite(bald))):
            raise InvalidInputError("hair map contains non-finite values")
        if np.any((bald < 0) | (bald > 1)):
            raise InvalidInputError("baldness must lie in [0, 1]")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "baldness", bald)

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    @property
    def num_components(self) -> int:
        return self.coeffs.shape[2]

    def active(self, threshold: float = BALD_THRESHOLD) -> np.ndarray:
        return self.baldness >= threshold

    def coarse(self, split: int = 10) -> np.ndarray:
        return self.coeffs[..., :split]

    def fine(self, split: int = 10) -> np.ndarray:
        return self.coeffs[..., split:]


@dataclass(frozen=True)
class RootGrid:
    """Per-texel scalp roots sampled at texel centres."""

    head: HeadModel
    positions: np.ndarray  # (H, W, 3)
    frames: np.ndarray  # (H, W, 3, 3), columns = tangent, bitangent, normal

    @property
    def shape(self) -> tuple[int, int]:
        return self.positions.shape[:2]


def texel_uv(height: int, width: int) -> np.ndarray:
    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    return np.stack([u, v], axis=-1)


def root_grid(head: HeadModel, height: int, width: int) -> RootGrid:
    uv = texel_uv(height, width)
    pos, frame = scalp_point(head, uv[..., 0], uv[..., 1])
    return RootGrid(head=head, positions=pos, frames=frame)


@dataclass(frozen=True)
class HairMap:
    points: np.ndarray  # (H, W, L, 3) world space; zeros at inactive texels
    active: np.ndarray  # (H, W) bool
    roots: RootGrid

    @property
    def shape(self) -> tuple[int, int]:
        return self.active.shape

    @property
    def num_points(self) -> int:
        return self.points.shape[2]

    def strands(self) -> np.ndarray:
        """Active strands as an ``(n, L, 3)`` array in row-major texel order."""
        return self.points[self.active]

    def local_points(self) -> np.ndarray:
        """Root-local coordinates of every texel's strand."""
        rel = self.points - self.roots.positions[:, :, None, :]
        return np.einsum("hwji,hwlj->hwli", self.roots.frames, rel)


def to_world(local, roots: RootGrid) -> np.ndarray:
    return np.einsum("hwij,hwlj->hwli", roots.frames, local) + roots.positions[:, :, None, :]


def decode_local(coeffs, basis: StrandBasis) -> np.ndarray:
    """Decode coefficients to root-local strands, re-anchored so point 0 is the origin."""
    local = decode_strand(coeffs, basis)
    return local - local[..., :1, :]


def decode_map(pca: PcaHairMap, basis: StrandBasis, roots: RootGrid, bald_threshold: float = BALD_THRESHOLD) -> HairMap:
    if pca.num_components != basis.num_components:
        raise ShapeError(f"map has {pca.num_components} coefficients, basis {basis.num_components}")
    if roots.shape != (pca.height, pca.width):
        raise ShapeError(f"root grid {roots.shape} does not match map {(pca.height, pca.width)}")
    active = pca.active(bald_threshold)
    points = np.zeros((pca.height, pca.width, basis.L, 3))
    if active.any():
        local = decode_local(pca.coeffs[active], basis)
        world = np.einsum("nij,nlj->nli", roots.frames[active], local) + roots.positions[active][:, None, :]
        points[active] = world
    return HairMap(points=points, active=active, roots=roots)


def project_dataset(strands, uvs, basis: StrandBasis, head: HeadModel, grid=(64, 64)) -> PcaHairMap:
    """Rasterise world-space strands with root UVs onto a PCA hair map.

    Each texel that receives at least one root keeps the strand whose root UV
    is closest to the texel centre (lowest index on ties); its geometry is
    expressed in that texel's root frame before encoding.
    """
    height, width = grid
    coeffs = np.zeros((height, width, basis.num_components))
    bald = np.zeros((height, width))
    strands = np.asarray(strands, dtype=np.float64)
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    if strands.size == 0:
        return PcaHairMap(coeffs, bald)
    if strands.ndim != 3 or strands.shape[0] != uvs.shape[0]:
        raise ShapeError("need one root UV per strand")
    if np.any((uvs < 0) | (uvs >= 1)):
        raise InvalidInputError("root UVs must lie in [0, 1)")
    cols = np.floor(uvs[:, 0] * width).astype(int)
    rows = np.floor(uvs[:, 1] * height).astype(int)
    centres = texel_uv(height, width)[rows, cols]
    dist = np.sum((uvs - centres) ** 2, axis=1)
    texel = rows * width + cols
    # lexsort: primary texel, then distance, then index
    order = np.lexsort((np.arange(len(texel)), dist, texel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = texel[order][1:] != texel[order][:-1]
    winners = order[first]
    roots = root_grid(head, height, width)
    r, c = rows[winners], cols[winners]
    rel = strands[winners] - strands[winners][:, :1, :]
    local = np.einsum("nji,nlj->nli", roots.frames[r, c], rel)
    coeffs[r, c] = encode_strand(local, basis)
    bald[r, c] = 1.0
    return PcaHairMap(coeffs, bald)


def _bilinear_taps(n_out: int, n_in: int):
    factor = n_out // n_in
    xs = (np.arange(n_out) + 0.5) / factor - 0.5
    xs = np.clip(xs, 0.0, n_in - 1)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, n_in - 1)
    frac = xs - x0
    return x0, x1, frac, np.arange(n_out) // factor


def upsample_matrix(active, target, nearest_weight: float = NEAREST_WEIGHT):
    """Sparse interpolation operator from guide texels to a denser grid.

    Returns ``(W, out_active)`` where ``W`` has shape ``(Ho*Wo, Hi*Wi)`` and
    maps row-major guide texel values to output texels. Each active output row
    is ``nearest_weight`` times its block-parent guide plus the remainder times
    the bilinear blend of the active guides among its four neighbours.
    """
    active = np.asarray(active, dtype=bool)
    hi, wi = active.shape
    ho, wo = target
    if ho % hi or wo % wi or ho < hi or wo < wi:
        raise ShapeError(f"target {target} is not an integer multiple of {active.shape}")
    if not 0.0 <= nearest_weight <= 1.0:
        raise InvalidInputError("nearest_weight must lie in [0, 1]")
    y0, y1, fy, ny = _bilinear_taps(ho, hi)
    x0, x1, fx, nx = _bilinear_taps(wo, wi)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    NY, NX = np.meshgrid(ny, nx, indexing="ij")
    out_active = active[NY, NX]

    taps = [
        (Y0, X0, (1 - FY) * (1 - FX)),
        (Y0, X1, (1 - FY) * FX),
        (Y1, X0, FY * (1 - FX)),
        (Y1, X1, FY * FX),
    ]
    wsum = sum(np.where(active[yy, xx], w, 0.0) for yy, xx, w in taps)
    rows, cols, vals = [], [], []
    out_index = np.arange(ho * wo).reshape(ho, wo)
    for yy, xx, w in taps:
        ok = out_active & active[yy, xx] & (w > 0)
        rows.append(out_index[ok])
        cols.append((yy * wi + xx)[ok])
        vals.append(((1.0 - nearest_weight) * w / np.where(wsum > 0, wsum, 1.0))[ok])
    rows.append(out_index[out_active])
    cols.append((NY * wi + NX)[out_active])
    vals.append(np.full(int(out_active.sum()), nearest_weight))
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ho * wo, hi * wi)
    )
    mat.sum_duplicates()
    return mat, out_active


def upsample_guides(hair: HairMap, target=(256, 256), nearest_weight: float = NEAREST_WEIGHT) -> HairMap:
    """Densify guide strands by blending root-local geometry, then re-rooting."""
    mat, out_active = upsample_matrix(hair.active, target, nearest_weight)
    L = hair.num_points
    local = hair.local_points().reshape(-1, L * 3)
    dense_local = (mat @ local).reshape(target[0], target[1], L, 3)
    roots = root_grid(hair.roots.head, *target)
    points = to_world(dense_local, roots)
    points[~out_active] = 0.0
    return HairMap(points=points, active=out_active, roots=roots)
