"""Analytic head model, scalp chart and pinhole camera.

Conventions: the head frame has +z pointing up through the crown and the face
looking down -y. Cameras are right-handed, look down their +z axis and have
image y pointing down. Pixel ``(x, y)`` is sampled at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

POLE_CLAMP = (0.001, 0.999)
ROOT_LIFT = 1e-12  # relative outward offset of scalp roots


@dataclass(frozen=True)
class HeadModel:
    center: tuple = (0.0, 0.0, 0.0)
    radii: tuple = (0.08, 0.095, 0.1)
    # polar angle (from +z) covered by the scalp chart, radians
    cap: tuple = (0.0, 1.9)

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float64)
        if radii.shape != (3,) or np.any(radii <= 0):
            raise InvalidInputError(f"head radii must be 3 positive values, got {self.radii}")
        if not 0.0 <= self.cap[0] < self.cap[1] <= np.pi:
            raise InvalidInputError(f"scalp cap must satisfy 0 <= lo < hi <= pi, got {self.cap}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in radii))
        object.__setattr__(self, "cap", tuple(float(c) for c in self.cap))


def head_sdf(head: HeadModel, p, with_grad: bool = False):
    """Signed distance to the ellipsoid head (negative inside).

    Uses the first-order estimate ``(|q| - 1) / |grad |q||`` with
    ``q = (p - c) / radii``; exact for spheres. At the centre, where the
    gradient vanishes, the scale falls back to the smallest radius.
    """
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(head.radii)
    d = p - np.asarray(head.center)
    q = d / r
    w = d / r**2
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(w, axis=-1)
    tiny = 1e-300
    centre = k1 < 1e-12 * np.min(1.0 / r)
    ratio = np.where(centre, np.min(r), k0 / np.where(centre, 1.0, k1))
    sdf = (k0 - 1.0) * ratio
    if not with_grad:
        return sdf
    # sdf = k0^2/k1 - k0/k1
    k0s = np.where(centre, 1.0, k0)[..., None]
    k1s = np.where(centre, 1.0, k1)[..., None]
    dk0 = w / np.maximum(k0s, tiny)
    dk1 = (d / r**4) / k1s
    grad = ((2.0 * k0s - 1.0) * dk0 * k1s - (k0s**2 - k0s) * dk1) / k1s**2
    grad = np.where(centre[..., None], 0.0, grad)
    return sdf, grad


def ellipsoid_point(head: HeadModel, theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    unit = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    return np.asarray(head.center) + np.asarray(head.radii) * unit


def chart_angles(head: HeadModel, u, v):
    v = np.clip(np.asarray(v, dtype=np.float64), *POLE_CLAMP)
    lo, hi = head.cap
    theta = lo + (1.0 - v) * (hi - lo)
    phi = 2.0 * np.pi * np.asarray(u, dtype=np.float64)
    return theta, phi


def scalp_point(head: HeadModel, u, v):
    """Scalp position and root frame for chart coordinates ``(u, v)``.

    ``u`` wraps around the head in azimuth; ``v = 1`` is the crown. Returns
    ``(position, frame)`` with ``frame[..., :, 0]`` the u-tangent,
    ``frame[..., :, 1]`` the bitangent (towards the crown) and
    ``frame[..., :, 2]`` the outward normal.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
        raise InvalidInputError("chart coordinates must lie in [0, 1]")
    theta, phi = chart_angles(head, u, v)
    r = np.asarray(head.radii)
    pos = ellipsoid_point(head, theta, phi)
    normal = (pos - np.asarray(head.center)) / r**2
    # nudge off the zero level set so rounding never puts a root inside the head
    pos = np.asarray(head.center) + (pos - np.asarray(head.center)) * (1.0 + ROOT_LIFT)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    # d pos / d phi (up to the sin(theta) factor)
    tangent = r * np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    tangent -= np.sum(tangent * normal, axis=-1, keepdims=True) * normal
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    bitangent = np.cross(normal, tangent)
    frame = np.stack([tangent, bitangent, normal], axis=-1)
    return pos, frame


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = 1e-3

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise InvalidInputError("camera rotation must be a proper orthonormal matrix")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t


def project(cam: CameraModel, p):
    """Pinhole projection. Returns ``(pixel_xy, depth, valid)``."""
    pc = cam.to_camera(p)
    z = pc[..., 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    xy = np.stack([cam.fx * pc[..., 0] / zs + cam.cx, cam.fy * pc[..., 1] / zs + cam.cy], axis=-1)
    xy = np.where(valid[..., None], xy, np.nan)
    return xy, z, valid


def unproject(cam: CameraModel, xy, depth) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    pc = np.stack(
        [(xy[..., 0] - cam.cx) / cam.fx * depth, (xy[..., 1] - cam.cy) / cam.fy * depth, depth], axis=-1
    )
    return (pc - cam.t) @ cam.R


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, fx, fy=None, width, height, cx=None, cy=None):
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraModel(
        fx=float(fx),
        fy=float(fy if fy is not None else fx),
        cx=float(cx if cx is not None else (width - 1) / 2),
        cy=float(cy if cy is not None else (height - 1) / 2),
        R=R,
        t=-R @ eye,
        width=int(width),
        height=int(height),
    )


def hemisphere_camera(azimuth, elevation, distance, *, target=(0.0, 0.0, 0.0), fx, width, height):
    """Camera on a sphere around ``target``; azimuth 0 looks at the face (from -y)."""
    eye = np.asarray(target, dtype=np.float64) + distance * np.array(
        [np.sin(azimuth) * np.cos(elevation), -np.cos(azimuth) * np.cos(elevation), np.sin(elevation)]
    )
    return look_at(eye, target, fx=fx, width=width, height=height)
