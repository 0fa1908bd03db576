"""Frequency-domain PCA strand codec.

Strands are ``(L, 3)`` float arrays, root first, in root-local coordinates
(root at the origin, +z along the scalp normal). All functions accept extra
leading batch dimensions.

The real-input DFT uses the unitary ``1/sqrt(L)`` convention. A strand's
frequency vector is flattened as ``[band][xyz][real, imag]`` into ``6k``
reals, ``k = L // 2 + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError, UnderdeterminedError

NORMALIZATION = "ortho"
DEFAULT_POINTS = 200
DEFAULT_COMPONENTS = 64
COARSE_COMPONENTS = 10
IPCA_BATCH = 1024
DEGENERATE_SEGMENT = 1e-12


def num_bands(L: int) -> int:
    return L // 2 + 1


def validate_strand(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim < 2 or points.shape[-1] != 3:
        raise ShapeError(f"strand must have shape (..., L, 3), got {points.shape}")
    if points.shape[-2] < 2:
        raise ShapeError("strand needs at least 2 points")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("strand contains non-finite coordinates")
    return points


def dft_strand(points) -> np.ndarray:
    """One-sided unitary DFT per coordinate channel.

    Returns a complex array of shape ``(..., k, 3)``.
    """
    points = validate_strand(points)
    return np.fft.rfft(points, axis=-2, norm=NORMALIZATION)


def idft_strand(freq, L: int) -> np.ndarray:
    freq = np.asarray(freq)
    if freq.ndim < 2 or freq.shape[-1] != 3:
        raise ShapeError(f"spectrum must have shape (..., k, 3), got {freq.shape}")
    if freq.shape[-2] != num_bands(L):
        raise ShapeError(f"expected {num_bands(L)} bands for L={L}, got {freq.shape[-2]}")
    return np.fft.irfft(freq, n=L, axis=-2, norm=NORMALIZATION)


def flatten_spectrum(freq) -> np.ndarray:
    """``(..., k, 3)`` complex -> ``(..., 6k)`` real in [band][xyz][re, im] order."""
    freq = np.asarray(freq)
    parts = np.stack([freq.real, freq.imag], axis=-1)
    return parts.reshape(*freq.shape[:-2], -1)


def unflatten_spectrum(flat) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape[-1] % 6:
        raise ShapeError(f"flattened spectrum length {flat.shape[-1]} is not a multiple of 6")
    parts = flat.reshape(*flat.shape[:-1], flat.shape[-1] // 6, 3, 2)
    return parts[..., 0] + 1j * parts[..., 1]


@dataclass(frozen=True)
class StrandBasis:
    """PCA basis in strand frequency space.

    ``components`` has shape ``(num_components, 6k)`` with orthonormal rows and
    ``mean`` has shape ``(k, 3, 2)``. ``variance`` holds the explained variance
    of each component (used to whiten coefficients during fitting).
    """

    components: np.ndarray
    mean: np.ndarray
    L: int
    variance: np.ndarray = field(default=None)

    def __post_init__(self):
        k = num_bands(self.L)
        comps = np.asarray(self.components, dtype=np.float64)
        mean = np.asarray(self.mean, dtype=np.float64).reshape(k, 3, 2)
        if comps.ndim != 2 or comps.shape[1] != 6 * k:
            raise ShapeError(f"components must be (n, {6 * k}), got {comps.shape}")
        if comps.shape[0] > 6 * k:
            raise ShapeError("more components than frequency dimensions")
        var = self.variance
        var = np.ones(comps.shape[0]) if var is None else np.asarray(var, dtype=np.float64)
        if var.shape != (comps.shape[0],):
            raise ShapeError("variance length must equal num_components")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def num_components(self) -> int:
        return self.components.shape[0]

    @property
    def k(self) -> int:
        return num_bands(self.L)

    @property
    def stddev(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0))

    def mean_strand(self) -> np.ndarray:
        return idft_strand(unflatten_spectrum(self.mean.reshape(-1)), self.L)

    def point_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Affine map from coefficients to flattened points.

        Returns ``(A, offset)`` with ``decode(g).ravel() == A @ g + offset``,
        ``A`` of shape ``(3L, num_components)``.
        """
        cols = idft_strand(unflatten_spectrum(self.components), self.L)
        offset = self.mean_strand().reshape(-1)
        A = cols.reshape(self.num_components, -1).T
        return A, offset


def _spectra(strands) -> np.ndarray:
    return flatten_spectrum(dft_strand(strands))


def _canonical_signs(vt: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vt * signs[:, None]


def fit_basis(strands, num_components: int = DEFAULT_COMPONENTS, batch_size: int = IPCA_BATCH) -> StrandBasis:
    """Fit a frequency-domain PCA basis with batched incremental SVD updates.

    A first pass computes the exact mean spectrum; the second pass merges
    mean-centred batches into a running ``(rank, 6k)`` factorisation, so peak
    memory depends on ``batch_size`` and ``6k`` only.
    """
    if isinstance(strands, np.ndarray):
        if strands.ndim != 3:
            raise ShapeError(f"corpus must be (n, L, 3), got {strands.shape}")
        n = strands.shape[0]
        L = strands.shape[1]
        get = lambda a, b: strands[a:b]  # noqa: E731
    else:
        strands = list(strands)
        n = len(strands)
        lengths = {np.shape(s)[0] for s in strands}
        if len(lengths) > 1:
            raise ShapeError(f"corpus mixes point counts {sorted(lengths)}")
        L = lengths.pop() if lengths else 0
        get = lambda a, b: np.stack(strands[a:b])  # noqa: E731
    if n < num_components or n == 0:
        raise UnderdeterminedError(f"{n} strands cannot determine {num_components} components")
    dim = 6 * num_bands(L)
    if num_components > dim:
        raise ShapeError(f"num_components={num_components} exceeds 6k={dim}")

    total = np.zeros(dim)
    for start in range(0, n, batch_size):
        total += _spectra(get(start, start + batch_size)).sum(axis=0)
    mean = total / n

    sing = np.zeros(0)
    vt = np.zeros((0, dim))
    for start in range(0, n, batch_size):
        centred = _spectra(get(start, start + batch_size)) - mean
        stacked = np.vstack([sing[:, None] * vt, centred])
        _, sing, vt = np.linalg.svd(stacked, full_matrices=False)
        rank = min(dim, sing.size)
        sing, vt = sing[:rank], vt[:rank]

    if vt.shape[0] < num_components:
        # fewer merged rows than requested: complete with an orthonormal basis
        q, _ = np.linalg.qr(np.vstack([vt, np.eye(dim)]).T)
        vt = q.T[:num_components]
        sing = np.concatenate([sing, np.zeros(num_components - sing.size)])
    comps = _canonical_signs(vt[:num_components])
    variance = sing[:num_components] ** 2 / max(n - 1, 1)
    return StrandBasis(components=comps, mean=mean.reshape(-1, 3, 2), L=L, variance=variance)


def encode_strand(points, basis: StrandBasis) -> np.ndarray:
    """Project strands onto the basis: ``gamma = X (flat(dft(s)) - mean)``."""
    points = validate_strand(points)
    if points.shape[-2] != basis.L:
        raise ShapeError(f"strand has {points.shape[-2]} points, basis expects {basis.L}")
    return (_spectra(points) - basis.mean.reshape(-1)) @ basis.components.T


def decode_strand(gamma, basis: StrandBasis) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[-1] != basis.num_components:
        raise ShapeError(f"expected {basis.num_components} coefficients, got {gamma.shape[-1]}")
    flat = basis.mean.reshape(-1) + gamma @ basis.components
    return idft_strand(unflatten_spectrum(flat), basis.L)


def segment_directions(points, fallback=(0.0, 0.0, 1.0)):
    """Unit segment directions with the degenerate-segment rule.

    A segment shorter than 1e-12 inherits the previous segment's direction
    (the root segment falls back to ``fallback``). Returns ``(b, lengths,
    degenerate)`` with ``b`` of shape ``(..., L-1, 3)``.
    """
    points = np.asarray(points, dtype=np.float64)
    v = np.diff(points, axis=-2)
    lengths = np.linalg.norm(v, axis=-1)
    degenerate = lengths < DEGENERATE_SEGMENT
    b = v / np.where(degenerate, 1.0, lengths)[..., None]
    if degenerate.any():
        fallback = np.asarray(fallback, dtype=np.float64)
        for j in range(v.shape[-2]):
            bad = degenerate[..., j]
            if not bad.any():
                continue
            prev = fallback if j == 0 else b[..., j - 1, :]
            b[..., j, :] = np.where(bad[..., None], prev, b[..., j, :])
    return b, lengths, degenerate


def curvature(points, fallback=(0.0, 0.0, 1.0)):
    """Scalar curvature ``g_j = |b_j x b_{j+1}|`` at the L-2 interior points.

    Returns ``(g, degenerate)`` where ``degenerate`` flags segments whose
    direction was substituted.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-2] < 3:
        raise ShapeError("curvature needs at least 3 points")
    b, _, degenerate = segment_directions(points, fallback)
    g = np.linalg.norm(np.cross(b[..., :-1, :], b[..., 1:, :]), axis=-1)
    return np.clip(g, 0.0, 1.0), degenerate
