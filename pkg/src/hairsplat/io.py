"""File formats: basis and hair-map binaries, strand text export, key-value descriptors, PFM/PGM."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import NORMALIZATION, StrandBasis, num_bands
from .errors import InvalidInputError, ShapeError
from .hairmap import PcaHairMap
from .losses import TargetMaps
from .scalp import CameraModel, HeadModel

BASIS_MAGIC = b"SBAS1"
HMAP_MAGIC = b"HMAP1"
_BASIS_HEADER = struct.Struct("<III8s")
_HMAP_HEADER = struct.Struct("<III")


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise InvalidInputError("unexpected end of file")
    return data


def write_basis(path, basis: StrandBasis) -> None:
    """Header ``L, k, num_components, tag`` then mean, components and explained variance (float64 LE)."""
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(_BASIS_HEADER.pack(basis.L, basis.k, basis.num_components, NORMALIZATION.encode().ljust(8, b"\0")))
        fh.write(basis.mean.astype("<f8").tobytes())
        fh.write(basis.components.astype("<f8").tobytes())
        fh.write(basis.variance.astype("<f8").tobytes())


def read_basis(path) -> StrandBasis:
    with open(path, "rb") as fh:
        if _read_exact(fh, 5) != BASIS_MAGIC:
            raise InvalidInputError(f"{path}: not a basis file")
        L, k, nc, tag = _BASIS_HEADER.unpack(_read_exact(fh, _BASIS_HEADER.size))
        if tag.rstrip(b"\0").decode() != NORMALIZATION:
            raise InvalidInputError(f"{path}: unsupported DFT normalization {tag!r}")
        if k != num_bands(L):
            raise ShapeError(f"{path}: k={k} inconsistent with L={L}")
        mean = np.frombuffer(_read_exact(fh, 8 * k * 6), dtype="<f8").reshape(k, 3, 2)
        comps = np.frombuffer(_read_exact(fh, 8 * nc * 6 * k), dtype="<f8").reshape(nc, 6 * k)
        rest = fh.read()
        variance = np.frombuffer(rest[: 8 * nc], dtype="<f8") if len(rest) >= 8 * nc else None
    return StrandBasis(components=comps.copy(), mean=mean.copy(), L=L,
                       variance=None if variance is None else variance.copy())


def write_hairmap(path, pca: PcaHairMap) -> None:
    """Header ``W, H, num_components``; per-texel coefficients then the baldness plane (float32 LE)."""
    with open(path, "wb") as fh:
        fh.write(HMAP_MAGIC)
        fh.write(_HMAP_HEADER.pack(pca.width, pca.height, pca.num_components))
        fh.write(pca.coeffs.astype("<f4").tobytes())
        fh.write(pca.baldness.astype("<f4").tobytes())


def read_hairmap(path) -> PcaHairMap:
    with open(path, "rb") as fh:
        if _read_exact(fh, 5) != HMAP_MAGIC:
            raise InvalidInputError(f"{path}: not a hair map file")
        W, H, nc = _HMAP_HEADER.unpack(_read_exact(fh, _HMAP_HEADER.size))
        coeffs = np.frombuffer(_read_exact(fh, 4 * H * W * nc), dtype="<f4").reshape(H, W, nc)
        bald = np.frombuffer(_read_exact(fh, 4 * H * W), dtype="<f4").reshape(H, W)
    return PcaHairMap(coeffs.astype(np.float64), bald.astype(np.float64))


def format_strand(points) -> str:
    pts = np.asarray(points, dtype=np.float64)
    return " ".join([str(len(pts))] + [f"{x:.9g}" for x in pts.ravel()])


def write_strands(path, strands) -> None:
    """One strand per line: point count followed by x y z triples."""
    with open(path, "w") as fh:
        for s in strands:
            fh.write(format_strand(s) + "\n")


def read_strands(path) -> list:
    strands = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            n = int(fields[0])
            if len(fields) != 1 + 3 * n:
                raise InvalidInputError(f"{path}:{lineno}: expected {3 * n} coordinates, got {len(fields) - 1}")
            strands.append(np.array(fields[1:], dtype=np.float64).reshape(n, 3))
    return strands


def read_kv(path) -> dict:
    """``key value [value ...]`` per line; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *vals = line.split()
            if not vals:
                raise InvalidInputError(f"{path}:{lineno}: key {key!r} has no value")
            out[key] = vals
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as fh:
        for key, val in items.items():
            vals = np.atleast_1d(np.asarray(val)).ravel()
            fh.write(key + " " + " ".join(_fmt(v) for v in vals) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _floats(kv, key, n, path):
    if key not in kv:
        raise InvalidInputError(f"{path}: missing key {key!r}")
    if len(kv[key]) != n:
        raise InvalidInputError(f"{path}: {key!r} needs {n} values")
    return [float(x) for x in kv[key]]


CAMERA_KEYS = {"fx", "fy", "cx", "cy", "R", "t", "W", "H", "near"}
HEAD_KEYS = {"center", "radii", "cap"}


def read_camera(path) -> CameraModel:
    kv = read_kv(path)
    unknown = set(kv) - CAMERA_KEYS
    if unknown:
        raise InvalidInputError(f"{path}: unknown keys {sorted(unknown)}")
    near = _floats(kv, "near", 1, path)[0] if "near" in kv else 1e-3
    return CameraModel(
        fx=_floats(kv, "fx", 1, path)[0],
        fy=_floats(kv, "fy", 1, path)[0],
        cx=_floats(kv, "cx", 1, path)[0],
        cy=_floats(kv, "cy", 1, path)[0],
        R=np.array(_floats(kv, "R", 9, path)).reshape(3, 3),
        t=np.array(_floats(kv, "t", 3, path)),
        width=int(_floats(kv, "W", 1, path)[0]),
        height=int(_floats(kv, "H", 1, path)[0]),
        near=near,
    )


def write_camera(path, cam: CameraModel) -> None:
    write_kv(path, {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "R": cam.R, "t": cam.t,
                    "W": cam.width, "H": cam.height, "near": cam.near})


def read_head(path) -> HeadModel:
    kv = read_kv(path)
    unknown = set(kv) - HEAD_KEYS
    if unknown:
        raise InvalidInputError(f"{path}: unknown keys {sorted(unknown)}")
    return HeadModel(center=tuple(_floats(kv, "center", 3, path)), radii=tuple(_floats(kv, "radii", 3, path)),
                     cap=tuple(_floats(kv, "cap", 2, path)))


def write_head(path, head: HeadModel) -> None:
    write_kv(path, {"center": np.array(head.center), "radii": np.array(head.radii), "cap": np.array(head.cap)})


def write_pfm(path, image) -> None:
    """Little-endian PFM. Two-channel images are stored as colour PFM with a zero third channel."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 2:
        img = np.concatenate([img, np.zeros(img.shape[:2] + (1,))], axis=2)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ShapeError(f"cannot store an image of shape {img.shape} as PFM")
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path, channels: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise InvalidInputError(f"{path}: not a PFM file")
        W, H = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        nch = 3 if kind == b"PF" else 1
        data = np.frombuffer(_read_exact(fh, 4 * W * H * nch), dtype=dtype)
    img = np.flipud(data.reshape((H, W, nch) if nch == 3 else (H, W))).astype(np.float64)
    if channels is not None and img.ndim == 3:
        img = img[..., :channels]
    return img


def write_pgm(path, mask) -> None:
    arr = np.asarray(mask)
    arr = (arr.astype(bool) * 255).astype(np.uint8) if arr.dtype == bool else np.clip(arr, 0, 255).astype(np.uint8)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InvalidInputError(f"{path}: only binary PGM (P5) is supported")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    arr = np.frombuffer(data[pos:], dtype=dtype, count=W * H).reshape(H, W)
    return arr.astype(np.int64)


def save_targets(prefix, targets: TargetMaps) -> None:
    prefix = str(prefix)
    write_pfm(prefix + "_sil.pfm", targets.silhouette)
    write_pfm(prefix + "_dir.pfm", targets.direction)
    write_pfm(prefix + "_depth.pfm", targets.depth)
    write_pgm(prefix + "_depthmask.pgm", targets.depth_valid)
    write_kv(prefix + "_meta.kv", {"depth_range": np.array(targets.depth_range)})


def load_targets(prefix) -> TargetMaps:
    prefix = str(prefix)
    sil = read_pfm(prefix + "_sil.pfm")
    direction = read_pfm(prefix + "_dir.pfm", channels=2)
    depth = read_pfm(prefix + "_depth.pfm")
    mask_path = Path(prefix + "_depthmask.pgm")
    valid = read_pgm(mask_path) > 0 if mask_path.exists() else sil > 0.5
    meta_path = Path(prefix + "_meta.kv")
    rng = (0.0, 1.0)
    if meta_path.exists():
        kv = read_kv(meta_path)
        rng = tuple(_floats(kv, "depth_range", 2, meta_path))
    return TargetMaps(sil, direction, depth, valid, rng)
