"""Procedural strands, hairstyles and self-contained fitting scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .codec import DEFAULT_POINTS, StrandBasis
from .hairmap import PcaHairMap, RootGrid, decode_map, root_grid
from .losses import TargetMaps
from .render import RenderBuffers, RenderConfig, build_splats, rasterize, reference_rasterize
from .scalp import CameraModel, HeadModel, chart_angles, head_sdf, hemisphere_camera, project


@dataclass(frozen=True)
class StrandStyle:
    amplitude: tuple = (0.0, 0.012)  # lateral wave amplitude at the tip (scene units)
    frequency: tuple = (1.0, 6.0)  # waves per strand
    length: tuple = (0.1, 0.3)
    droop: tuple = (0.2, 1.35)  # total bend away from the normal, radians (< pi/2)
    spread: float = 0.5  # stddev of the droop azimuth around -bitangent, radians
    frizz: float = 3e-4  # amplitude of high-frequency horizontal wiggle (scene units)
    frizz_frequency: tuple = (8.0, 40.0)


def gen_strand_corpus(seed: int, count: int, style: StrandStyle = StrandStyle(), L: int = DEFAULT_POINTS) -> np.ndarray:
    """Root-local strands: a drooping centreline with a lateral damped-in wave.

    The outward (z) coordinate increases monotonically along every strand
    because the bend stays below 90 degrees and the wave is purely lateral,
    so strands planted on a convex head never dip below their root's tangent
    plane.
    """
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, L)
    amp = rng.uniform(*style.amplitude, size=count)
    freq = rng.uniform(*style.frequency, size=count)
    length = rng.uniform(*style.length, size=count)
    droop = rng.uniform(*style.droop, size=count)
    power = rng.uniform(1.0, 2.5, size=count)
    psi = rng.normal(0.0, style.spread, size=count)
    phase = rng.uniform(0.0, 2 * np.pi, size=count)

    theta = droop[:, None] * s[None, :] ** power[:, None]
    down = np.stack([np.sin(psi), -np.cos(psi)], axis=1)
    tangent = np.empty((count, L, 3))
    tangent[..., 0] = np.sin(theta) * down[:, None, 0]
    tangent[..., 1] = np.sin(theta) * down[:, None, 1]
    tangent[..., 2] = np.cos(theta)
    ds = length[:, None] / (L - 1)
    # trapezoidal arc-length integration
    steps = 0.5 * (tangent[:, 1:] + tangent[:, :-1]) * ds[:, :, None]
    pts = np.concatenate([np.zeros((count, 1, 3)), np.cumsum(steps, axis=1)], axis=1)

    lateral = np.stack([np.cos(psi), np.sin(psi), np.zeros(count)], axis=1)
    wave = amp[:, None] * s[None, :] * np.sin(2 * np.pi * freq[:, None] * s[None, :] + phase[:, None])
    wave -= wave[:, :1]
    pts += wave[:, :, None] * lateral[:, None, :]
    # frizz: a few random high-frequency sinusoids in the horizontal plane, zero at the root
    if style.frizz > 0:
        fq = rng.uniform(*style.frizz_frequency, size=(count, 4, 2))
        ph = rng.uniform(0.0, 2 * np.pi, size=(count, 4, 2))
        wig = np.sin(2 * np.pi * fq[:, :, None, :] * s[None, None, :, None] + ph[:, :, None, :]).sum(axis=1)
        wig = style.frizz * 0.5 * (wig - wig[:, :1]) * np.sqrt(s)[None, :, None]
        pts[..., 0] += wig[..., 0]
        pts[..., 1] += wig[..., 1]
    return pts


def _smooth_field(rng, shape, channels, coarse=4) -> np.ndarray:
    low = rng.normal(size=(coarse, coarse, channels))
    zoom = (shape[0] / coarse, shape[1] / coarse, 1)
    field = ndimage.zoom(low, zoom, order=1, mode="nearest", grid_mode=True)
    field = field[: shape[0], : shape[1]]
    std = field.reshape(-1, channels).std(axis=0)
    return field / np.where(std > 0, std, 1.0)


def default_baldness(head: HeadModel, shape) -> np.ndarray:
    """Hair everywhere on the chart except a face-side sector below the hairline."""
    H, W = shape
    v, u = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    theta, phi = chart_angles(head, u, v)
    face = -0.5 * np.pi
    dphi = np.angle(np.exp(1j * (phi - face)))
    bald = (np.abs(dphi) < np.deg2rad(55)) & (theta > 0.8)
    return np.where(bald, 0.0, 1.0)


def sample_hairstyle(seed: int, basis: StrandBasis, head: HeadModel, shape=(16, 16), clip: float = 2.0,
                     margin: float = 1e-4, coarse: int = 4) -> PcaHairMap:
    """Spatially smooth coefficient map within ``clip`` standard deviations.

    Texels whose decoded strand would come closer than ``margin`` to the head
    surface (excluding the root) are shrunk towards the mean strand.
    """
    rng = np.random.default_rng(seed)
    z = np.clip(_smooth_field(rng, shape, basis.num_components, coarse), -clip, clip)
    bald = default_baldness(head, shape)
    roots = root_grid(head, *shape)
    for _ in range(12):
        pca = PcaHairMap(z * basis.stddev, bald)
        hair = decode_map(pca, basis, roots)
        sdf = head_sdf(head, hair.points[:, :, 1:, :])
        bad = hair.active & (sdf.min(axis=-1) < margin)
        if not bad.any():
            return pca
        z[bad] *= 0.5
    z[bad] = 0.0
    pca = PcaHairMap(z * basis.stddev, bald)
    hair = decode_map(pca, basis, roots)
    if np.any(head_sdf(head, hair.points[hair.active][:, 1:]) < 0):
        raise ValueError("mean strand penetrates the head; basis is incompatible with this head")
    return pca


@dataclass
class Scene:
    hairstyle: PcaHairMap
    camera: CameraModel
    targets: TargetMaps
    roots: RootGrid
    head: HeadModel
    config: RenderConfig
    buffers: RenderBuffers


def targets_from_render(buffers: RenderBuffers, threshold: float = 0.5) -> TargetMaps:
    """Supervision maps from a render; depth is min-max normalized over the hair mask."""
    s = buffers.silhouette
    valid = (s > threshold) & buffers.depth_valid
    if valid.any():
        lo, hi = float(buffers.depth[valid].min()), float(buffers.depth[valid].max())
    else:
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    depth = np.where(valid, (buffers.depth - lo) / (hi - lo), 0.0)
    return TargetMaps(s, buffers.direction, depth, valid, (lo, hi))


def scene_camera(rng, *, image=64, distance=1.0, elevation=(0.0, 0.6), azimuth=(0.0, 2 * np.pi),
                 target=(0.0, 0.0, -0.05), half_extent=0.42) -> CameraModel:
    az = rng.uniform(*azimuth)
    el = rng.uniform(*elevation)
    fx = 0.5 * image * distance / half_extent
    return hemisphere_camera(az, el, distance, target=target, fx=fx, width=image, height=image)


def render_hairstyle(pca: PcaHairMap, basis: StrandBasis, roots: RootGrid, cam: CameraModel, config: RenderConfig,
                     reference: bool = False) -> RenderBuffers:
    hair = decode_map(pca, basis, roots)
    splats = build_splats(hair.strands(), config)
    if reference:
        return reference_rasterize(splats, cam, config)
    return rasterize(splats, cam, config, retain=False)


def gen_scene(seed: int, head: HeadModel, shape, basis: StrandBasis, *, image: int = 64,
              config: RenderConfig = RenderConfig(), camera=None, reference: bool = True, **camera_kw) -> Scene:
    """Ground-truth hairstyle, camera and rendered supervision for a closed-loop fit."""
    rng = np.random.default_rng(seed)
    pca = sample_hairstyle(int(rng.integers(2**31)), basis, head, shape)
    cam = camera if camera is not None else scene_camera(rng, image=image, **camera_kw)
    roots = root_grid(head, *shape)
    buffers = render_hairstyle(pca, basis, roots, cam, config, reference=reference)
    return Scene(pca, cam, targets_from_render(buffers), roots, head, config, buffers)


def perturb_hairstyle(pca: PcaHairMap, basis: StrandBasis, scale: float, seed: int) -> PcaHairMap:
    """Add Gaussian noise with per-component stddev ``scale * sigma_c`` to active texels."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=pca.coeffs.shape) * scale * basis.stddev
    noise[~pca.active()] = 0.0
    return PcaHairMap(pca.coeffs + noise, pca.baldness)


def camera_ring(count: int, *, image=64, distance=1.0, elevation=0.3, start=0.0, target=(0.0, 0.0, -0.05),
                half_extent=0.42):
    """Cameras evenly spaced in azimuth at a fixed elevation."""
    fx = 0.5 * image * distance / half_extent
    return [
        hemisphere_camera(start + 2 * np.pi * i / count, elevation, distance, target=target, fx=fx, width=image,
                          height=image)
        for i in range(count)
    ]


__all__ = [
    "StrandStyle",
    "gen_strand_corpus",
    "sample_hairstyle",
    "gen_scene",
    "Scene",
    "targets_from_render",
    "perturb_hairstyle",
    "camera_ring",
    "render_hairstyle",
    "project",
]
