"""Undirected orientation maps from oriented Gabor filters, and depth-map normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, InvalidInputError


@dataclass(frozen=True)
class OrientationMap:
    angle: np.ndarray  # (H, W) in [0, pi); line direction in pixel coords (x right, y down)
    confidence: np.ndarray
    mask: np.ndarray

    def vectors(self) -> np.ndarray:
        vec = np.stack([np.cos(self.angle), np.sin(self.angle)], axis=-1)
        return np.where(self.mask[..., None], vec, 0.0)


def gabor_kernel(theta: float, wavelength: float, sigma: float, aspect: float = 0.5) -> np.ndarray:
    """Complex Gabor kernel responding to lines running along ``theta``.

    The carrier oscillates across the line; the envelope has stddev ``sigma``
    across and ``sigma / aspect`` along it. The real part is made zero-mean.
    """
    along = sigma / aspect
    half = int(np.ceil(3 * max(sigma, along)))
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    u = x * np.cos(theta) + y * np.sin(theta)  # along the line
    w = -x * np.sin(theta) + y * np.cos(theta)  # across the line
    env = np.exp(-0.5 * (w**2 / sigma**2 + u**2 / along**2))
    even = env * np.cos(2 * np.pi * w / wavelength)
    even -= env * (even.sum() / env.sum())
    odd = env * np.sin(2 * np.pi * w / wavelength)
    return even + 1j * odd


def gabor_responses(image, n_orientations: int = 32, wavelength: float = 4.0, sigma: float = 2.0) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    thetas = np.arange(n_orientations) * np.pi / n_orientations
    out = np.empty((n_orientations,) + image.shape)
    for i, th in enumerate(thetas):
        k = gabor_kernel(th, wavelength, sigma)
        re = ndimage.correlate(image, k.real, mode="reflect")
        im = ndimage.correlate(image, k.imag, mode="reflect")
        out[i] = np.hypot(re, im)
    return out


def gabor_orientation(image, n_orientations: int = 32, wavelength: float = 4.0, sigma: float = 2.0) -> OrientationMap:
    """Per-pixel dominant line orientation with sub-bin quadratic peak interpolation."""
    image = np.asarray(image, dtype=np.float64)
    if n_orientations < 4:
        raise InvalidInputError("need at least 4 orientations")
    if image.ndim != 2:
        raise InvalidInputError("expected a 2D grayscale image")
    size = gabor_kernel(0.0, wavelength, sigma).shape[0]
    if min(image.shape) < size:
        raise InvalidInputError(f"image {image.shape} is smaller than the {size}x{size} kernel")
    if not np.all(np.isfinite(image)):
        raise InvalidInputError("image contains non-finite values")
    resp = gabor_responses(image, n_orientations, wavelength, sigma)
    n = n_orientations
    k = np.argmax(resp, axis=0)
    r0 = np.take_along_axis(resp, k[None], 0)[0]
    rm = np.take_along_axis(resp, ((k - 1) % n)[None], 0)[0]
    rp = np.take_along_axis(resp, ((k + 1) % n)[None], 0)[0]
    denom = rm - 2 * r0 + rp
    offset = np.where(denom < 0, 0.5 * (rm - rp) / np.where(denom < 0, denom, -1.0), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    angle = np.mod((k + offset) * np.pi / n, np.pi)
    floor = 1e-3 * (np.ptp(image) + 1.0)
    mean = resp.mean(axis=0)
    confidence = (r0 - mean) / (r0 + floor)
    mask = r0 > floor
    return OrientationMap(angle=angle, confidence=confidence, mask=mask)


def disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile at ``(n - 1) q`` via partial selection."""
    values = np.asarray(values, dtype=np.float64).ravel()
    h = (values.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, values.size - 1)
    part = np.partition(values, (lo, hi))
    return float(part[lo] + (h - lo) * (part[hi] - part[lo]))


def depth_normalize(depth, hair_mask, erode_radius: int = 2, q_low: float = 0.02, q_high: float = 0.98):
    """Erode the mask, clip in-mask depth to the 2nd/98th percentiles, min-max to [0, 1].

    Returns ``(normalized, valid)``; pixels outside the eroded mask are 0 and
    invalid. A zero clipping range maps every valid pixel to 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(hair_mask, dtype=bool)
    if erode_radius > 0:
        mask = ndimage.binary_erosion(mask, structure=disk(erode_radius))
    if not mask.any():
        raise DegenerateInputError("hair mask is empty after erosion")
    vals = depth[mask]
    lo, hi = quantile(vals, q_low), quantile(vals, q_high)
    out = np.zeros_like(depth)
    if hi > lo:
        out[mask] = (np.clip(vals, lo, hi) - lo) / (hi - lo)
    return out, mask
