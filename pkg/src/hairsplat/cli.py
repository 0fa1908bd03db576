"""Command-line entry point: ``hairsplat <command> [options]``.

Every command writes its outputs under ``--out-dir`` and prints one JSON line
with a summary on stdout. Bad flags exit with status 2, data errors with 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io
from .codec import DEFAULT_COMPONENTS, IPCA_BATCH, encode_strand, fit_basis, validate_strand
from .config import config_items, load_config
from .errors import DivergenceError, HairsplatError, InvalidInputError
from .gabor import depth_normalize, gabor_orientation
from .hairmap import decode_map, project_dataset, root_grid, upsample_guides
from .optim import chamfer_eval, eval_metrics, fit_hairmap
from .render import build_splats, rasterize, reference_rasterize
from .scalp import HeadModel
from .synth import camera_ring, gen_strand_corpus, perturb_hairstyle, sample_hairstyle, targets_from_render

THREADS_ENV = "HAIRSPLAT_THREADS"


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=float))


def _out(args, name) -> Path:
    return Path(args.out_dir) / name


def _require(path) -> str:
    if not Path(path).exists():
        raise InvalidInputError(f"{path}: no such file")
    return str(path)


def _strands_with_points(strands):
    lens = {len(s) for s in strands}
    if len(lens) != 1:
        raise InvalidInputError(f"strands have differing point counts {sorted(lens)}")
    return np.stack([validate_strand(s) for s in strands])


def cmd_pca_fit(args, cfg):
    if args.corpus:
        strands = _strands_with_points(io.read_strands(_require(args.corpus)))
    else:
        strands = gen_strand_corpus(cfg.seed, args.synthetic, L=args.points)
    basis = fit_basis(strands, args.components, args.batch)
    io.write_basis(_out(args, "basis.sbas"), basis)
    total = basis.variance.sum()
    with open(_out(args, "spectrum.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "stddev", "cumulative_fraction"])
        for c, (sd, cum) in enumerate(zip(basis.stddev, np.cumsum(basis.variance))):
            writer.writerow([c, repr(float(sd)), repr(float(cum / total)) if total > 0 else "nan"])
    from .plotting import plot_spectrum

    plot_spectrum(basis, _out(args, "spectrum.png"))
    return {"command": "pca-fit", "strands": int(len(strands)), "points": basis.L,
            "components": basis.num_components, "leading_stddev": float(basis.stddev[0])}


def cmd_encode(args, cfg):
    basis = io.read_basis(_require(args.basis))
    strands = _strands_with_points(io.read_strands(_require(args.strands)))
    if args.uv:
        uvs = np.loadtxt(_require(args.uv), ndmin=2)
        head = io.read_head(_require(args.head)) if args.head else HeadModel()
        pca = project_dataset(strands, uvs, basis, head, tuple(args.grid))
        io.write_hairmap(_out(args, "hairmap.hmap"), pca)
        return {"command": "encode", "strands": len(strands), "active_texels": int(pca.active().sum())}
    coeffs = np.stack([encode_strand(s, basis) for s in strands])
    np.savetxt(_out(args, "coeffs.csv"), coeffs, delimiter=",", fmt="%.17g")
    return {"command": "encode", "strands": len(strands), "components": basis.num_components}


def cmd_decode(args, cfg):
    basis = io.read_basis(_require(args.basis))
    pca = io.read_hairmap(_require(args.map))
    head = io.read_head(_require(args.head)) if args.head else HeadModel()
    hair = decode_map(pca, basis, root_grid(head, pca.height, pca.width), cfg.schedule.bald_threshold)
    if args.upsample:
        hair = upsample_guides(hair, tuple(args.upsample), cfg.schedule.nearest_weight)
    strands = hair.strands()
    io.write_strands(_out(args, "strands.txt"), strands)
    return {"command": "decode", "strands": int(len(strands)), "grid": list(hair.shape)}


def _render(pca, basis, head, cam, cfg, reference=False):
    hair = decode_map(pca, basis, root_grid(head, pca.height, pca.width), cfg.schedule.bald_threshold)
    splats = build_splats(hair.strands(), cfg.render)
    if reference:
        return reference_rasterize(splats, cam, cfg.render)
    return rasterize(splats, cam, cfg.render, retain=False)


def cmd_render(args, cfg):
    from .plotting import save_direction_png

    basis = io.read_basis(_require(args.basis))
    pca = io.read_hairmap(_require(args.map))
    head = io.read_head(_require(args.head)) if args.head else HeadModel()
    cam = io.read_camera(_require(args.cam))
    buffers = _render(pca, basis, head, cam, cfg, args.reference)
    targets = targets_from_render(buffers)
    prefix = _out(args, args.name)
    io.save_targets(prefix, targets)
    save_direction_png(str(prefix) + "_dir.png", buffers.direction, buffers.silhouette)
    return {"command": "render", "coverage": float((buffers.silhouette > 0.5).mean()),
            "depth_range": list(targets.depth_range)}


def _read_image(path) -> np.ndarray:
    path = _require(path)
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        img = io.read_pfm(path)
    elif suffix in (".pgm", ".pnm"):
        img = io.read_pgm(path).astype(np.float64) / 255.0
    else:
        import matplotlib.pyplot as plt

        img = np.asarray(plt.imread(path), dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=-1)
    return img


def cmd_gabor(args, cfg):
    from .plotting import save_direction_png

    summary = {"command": "gabor"}
    if args.image:
        img = _read_image(args.image)
        orient = gabor_orientation(img, args.orientations, args.wavelength, args.sigma)
        mask = orient.mask
        if args.mask:
            mask = mask & (io.read_pgm(_require(args.mask)) > 0)
        vec = np.where(mask[..., None], orient.vectors(), 0.0)
        io.write_pfm(_out(args, "orient_dir.pfm"), vec)
        io.write_pfm(_out(args, "orient_conf.pfm"), orient.confidence)
        io.write_pgm(_out(args, "orient_mask.pgm"), mask)
        save_direction_png(_out(args, "orient_dir.png"), vec, np.clip(orient.confidence, 0, 1) * mask)
        summary["mean_confidence"] = float(orient.confidence[mask].mean()) if mask.any() else 0.0
        summary["valid_pixels"] = int(mask.sum())
    if args.depth:
        if not args.mask:
            raise InvalidInputError("--depth needs --mask")
        depth = _read_image(args.depth)
        norm, valid = depth_normalize(depth, io.read_pgm(_require(args.mask)) > 0, args.erode)
        io.write_pfm(_out(args, "depth_norm.pfm"), norm)
        io.write_pgm(_out(args, "depth_mask.pgm"), valid)
        summary["depth_pixels"] = int(valid.sum())
    if len(summary) == 1:
        raise InvalidInputError("nothing to do: pass --image and/or --depth")
    return summary


def cmd_synth(args, cfg):
    head = HeadModel()
    corpus = gen_strand_corpus(cfg.seed, args.count, L=args.points)
    io.write_strands(_out(args, "corpus.txt"), corpus)
    basis = fit_basis(corpus, args.components)
    io.write_basis(_out(args, "basis.sbas"), basis)
    io.write_head(_out(args, "head.kv"), head)
    shape = tuple(args.grid)
    gt = sample_hairstyle(cfg.seed + 1, basis, head, shape)
    io.write_hairmap(_out(args, "gt.hmap"), gt)
    init = perturb_hairstyle(gt, basis, args.noise, cfg.seed + 2)
    io.write_hairmap(_out(args, "init.hmap"), init)
    rng = np.random.default_rng(cfg.seed + 3)
    cams = camera_ring(args.views, image=args.image, start=float(rng.uniform(0, 2 * np.pi)))
    roots = root_grid(head, *shape)
    for i, cam in enumerate(cams):
        io.write_camera(_out(args, f"cam{i}.kv"), cam)
        hair = decode_map(gt, basis, roots)
        buffers = reference_rasterize(build_splats(hair.strands(), cfg.render), cam, cfg.render)
        io.save_targets(_out(args, f"target{i}"), targets_from_render(buffers))
    return {"command": "synth", "corpus": args.count, "components": basis.num_components, "grid": list(shape),
            "views": len(cams), "active_texels": int(gt.active().sum())}


def _views(args):
    if not args.view:
        raise InvalidInputError("need at least one --view CAM PREFIX")
    return [(io.read_camera(_require(c)), io.load_targets(p)) for c, p in args.view]


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view", "iou", "undir", "depth_l1"])
        for i, (iou, undir, dep) in enumerate(rows):
            writer.writerow([i, repr(float(iou)), repr(float(undir)), repr(float(dep))])


def cmd_fit(args, cfg):
    from .plotting import plot_loss_curves, plot_render_comparison

    basis = io.read_basis(_require(args.basis))
    head = io.read_head(_require(args.head)) if args.head else HeadModel()
    views = _views(args)
    if args.init:
        init = io.read_hairmap(_require(args.init))
    else:
        init = sample_hairstyle(cfg.seed, basis, head, tuple(args.grid))
    roots = root_grid(head, init.height, init.width)
    io.write_kv(_out(args, "config.kv"), config_items(cfg))
    try:
        fitted, report = fit_hairmap(init, basis, roots, head, views, cfg.schedule, cfg.render)
    except DivergenceError as exc:
        if exc.report is not None:
            exc.report.write_csv(_out(args, "report.csv"))
        raise
    io.write_hairmap(_out(args, "fitted.hmap"), fitted)
    report.write_csv(_out(args, "report.csv"))
    plot_loss_curves(report, _out(args, "loss.png"))
    hair = decode_map(fitted, basis, roots, cfg.schedule.bald_threshold)
    io.write_strands(_out(args, "strands.txt"), hair.strands())
    rows = []
    splats = build_splats(hair.strands(), cfg.render)
    for i, (cam, target) in enumerate(views):
        buffers = rasterize(splats, cam, cfg.render, retain=False)
        rows.append(eval_metrics(buffers, target))
        plot_render_comparison(buffers, target, _out(args, f"compare{i}.png"), title=f"view {i}")
    _write_metrics(_out(args, "metrics.csv"), rows)
    return {"command": "fit", "steps": len(report.rows), "loss_first": report.rows[0]["total"],
            "loss_last": report.rows[-1]["total"], "wall_time": round(report.wall_time, 3), **report.final}


def cmd_eval(args, cfg):
    basis = io.read_basis(_require(args.basis))
    head = io.read_head(_require(args.head)) if args.head else HeadModel()
    pca = io.read_hairmap(_require(args.map))
    rows = []
    for cam, target in _views(args):
        rows.append(eval_metrics(_render(pca, basis, head, cam, cfg), target))
    _write_metrics(_out(args, "metrics.csv"), rows)
    arr = np.array(rows, dtype=np.float64)
    summary = {"command": "eval", "views": len(rows), "iou": float(arr[:, 0].mean()),
               "undir": float(np.nanmean(arr[:, 1])) if np.isfinite(arr[:, 1]).any() else float("nan"),
               "depth_l1": float(arr[:, 2].mean())}
    if args.gt_map:
        gt = io.read_hairmap(_require(args.gt_map))
        pred = decode_map(pca, basis, root_grid(head, pca.height, pca.width)).strands()
        ref = decode_map(gt, basis, root_grid(head, gt.height, gt.width)).strands()
        summary["chamfer_pos"], summary["chamfer_angle"] = chamfer_eval(pred, ref, seed=cfg.seed)
    return summary


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file (render.*, weights.*, schedule.*, seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--threads", type=int, help=f"BLAS threads, 0 = default (env {THREADS_ENV})")
    common.add_argument("--out-dir", default=".", help="output directory")

    parser = argparse.ArgumentParser(prog="hairsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pca-fit", parents=[common], help="fit a frequency-domain PCA strand basis")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="strand text file")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N procedural strands")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--components", type=int, default=DEFAULT_COMPONENTS)
    p.add_argument("--batch", type=int, default=IPCA_BATCH)
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("encode", parents=[common], help="encode strands into coefficients or a hair map")
    p.add_argument("--basis", required=True)
    p.add_argument("--strands", required=True)
    p.add_argument("--uv", help="root UV text file (one 'u v' per strand); writes a hair map")
    p.add_argument("--head")
    p.add_argument("--grid", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="decode a hair map to world-space strands")
    p.add_argument("--basis", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--head")
    p.add_argument("--upsample", type=int, nargs=2, metavar=("H", "W"))
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", parents=[common], help="render silhouette/direction/depth maps")
    p.add_argument("--basis", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--cam", required=True)
    p.add_argument("--head")
    p.add_argument("--name", default="render")
    p.add_argument("--reference", action="store_true", help="use the per-pixel reference rasterizer")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gabor", parents=[common], help="orientation map and depth normalization")
    p.add_argument("--image")
    p.add_argument("--mask", help="hair mask PGM")
    p.add_argument("--depth", help="depth PFM to normalize")
    p.add_argument("--orientations", type=int, default=32)
    p.add_argument("--wavelength", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--erode", type=int, default=2)
    p.set_defaults(func=cmd_gabor)

    p = sub.add_parser("synth", parents=[common], help="procedural corpus, basis and fitting scene")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--components", type=int, default=DEFAULT_COMPONENTS)
    p.add_argument("--grid", type=int, nargs=2, default=(16, 16), metavar=("H", "W"))
    p.add_argument("--image", type=int, default=64)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.5, help="init noise in units of coefficient stddev")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("fit", cmd_fit, "fit a hair map to target maps"),
                                 ("eval", cmd_eval, "metrics of a hair map against target maps")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--basis", required=True)
        p.add_argument("--head")
        p.add_argument("--view", nargs=2, action="append", metavar=("CAM", "PREFIX"),
                       help="camera descriptor and target-map prefix; repeatable")
        if name == "fit":
            p.add_argument("--init", help="initial hair map (default: procedural sample)")
            p.add_argument("--grid", type=int, nargs=2, default=(16, 16), metavar=("H", "W"))
        else:
            p.add_argument("--map", required=True)
            p.add_argument("--gt-map", help="ground-truth map for chamfer metrics")
        p.set_defaults(func=func)
    return parser


def _thread_limit(flag):
    n = flag
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise InvalidInputError(f"{THREADS_ENV} must be an integer") from None
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config and _require(args.config), args.set)
        if args.seed is not None:
            cfg = type(cfg)(render=cfg.render, schedule=cfg.schedule, seed=args.seed)
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads):
            summary = args.func(args, cfg)
    except (HairsplatError, OSError, ValueError) as exc:
        print(f"hairsplat {args.command}: {exc}", file=sys.stderr)
        return 1
    _emit(summary)
    return 0


def main() -> None:
    sys.exit(run())
