"""Command-line interface: synth, downsample, align, fit, render, eval and pipeline.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, io, pipeline
from .losses import DEFAULT_LAMBDA, acc_loss, dssim_loss, l1_loss, psnr, ssim
from .optim import PRESETS, DivergenceError, OptimConfig, default_lrs, fit
from .pointmap import align, downsample
from .render import render
from .synth import SynthSpec, make_pointmaps, make_scene, make_truth

log = logging.getLogger("aquasplat")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
ENV_OUT = "AQUASPLAT_OUT"
ENV_THREADS = "AQUASPLAT_THREADS"


class InputError(Exception):
    pass


def version_string() -> str:
    """``git describe``-style version; falls back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# --------------------------------------------------------------------------- config handling

def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag spelling without dashes."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(action: argparse.Action, raw: str):
    if action.nargs == 0:
        return raw.lower() in ("1", "true", "yes", "on")
    val = action.type(raw) if action.type else raw
    if action.choices is not None and val not in action.choices:
        raise InputError(f"invalid value {raw!r} for {action.dest}")
    return val


def apply_overrides(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    """Precedence: command-line flag > environment > config file > default."""
    tokens = {t.split("=", 1)[0] for t in argv}
    given = {a.dest for a in parser._actions if tokens.intersection(a.option_strings)}
    actions = {a.dest: a for a in parser._actions}
    # config keys may use either the flag spelling or the destination name
    for a in parser._actions:
        for opt in a.option_strings:
            if opt.startswith("--"):
                actions.setdefault(opt[2:].replace("-", "_"), a)
    if getattr(args, "config", None):
        for k, raw in read_config_file(args.config).items():
            if k not in actions or actions[k].dest in ("config", "help", "version"):
                raise InputError(f"unknown config key {k!r}")
            action = actions[k]
            if action.dest not in given:
                try:
                    setattr(args, action.dest, _coerce(action, raw))
                except ValueError as exc:
                    raise InputError(f"bad value for {k}: {raw!r}") from exc
    if "threads" not in given and os.environ.get(ENV_THREADS):
        args.threads = int(os.environ[ENV_THREADS])
    if "out" in actions and "out" not in given and os.environ.get(ENV_OUT):
        args.out = os.environ[ENV_OUT]


def write_manifest(out_dir, args: argparse.Namespace, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    m = {"command": args.command, "config": cfg, "version": version_string(),
         "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extra:
        m.update(extra)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    io.write_json(Path(out_dir) / "manifest.json", m)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_images(directory, n: int) -> list[np.ndarray]:
    """``view_XX.npy`` if present (lossless), else ``view_XX.png``."""
    d = _require(directory, "image directory")
    out = []
    for i in range(n):
        for ext in (".npy", ".png"):
            p = d / f"view_{i:02d}{ext}"
            if p.exists():
                out.append(io.read_image(p))
                break
        else:
            raise InputError(f"missing image for view {i} in {d}")
    return out


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, n_gaussians=args.n_gaussians, n_views=args.n_views, resolution=args.resolution,
                     pointmap_resolution=args.pointmap_resolution, noise_sigma=args.noise, sh_degree=args.sh_degree,
                     extent=args.extent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, medium, views = make_scene(spec)
    truth = make_truth(scene, medium, views)
    io.write_scene(out / "scene.ply", scene)
    io.write_medium(out / "medium.json", medium)
    io.write_cameras(out / "cameras.json", views)
    for name, imgs in (("clean", truth.clean), ("degraded", truth.degraded)):
        (out / name).mkdir(exist_ok=True)
        for i, img in enumerate(imgs):
            io.write_png(out / name / f"view_{i:02d}.png", img, args.gamma)
            io.save_npy(out / name / f"view_{i:02d}.npy", img)
    if spec.n_views >= 2:
        io.write_graph(out / "pointmaps", make_pointmaps(scene, views, spec.noise_sigma, spec))
    write_manifest(out, args, {"spec": spec.to_dict()})
    print(out)
    return EXIT_OK


def cmd_downsample(args) -> int:
    src = _require(args.input, "input")
    out = Path(args.out)
    if src.is_dir():
        graph = io.read_graph(src)
        io.write_graph(out, pipeline.downsample_graph(graph, args.voxel))
        write_manifest(out, args)
    else:
        pts, conf, cols = io.read_cloud(src)
        _, _, idx = downsample(pts, conf, args.voxel, return_index=True)
        out.parent.mkdir(parents=True, exist_ok=True)
        io.write_cloud(out, pts[idx], conf[idx], None if cols is None else cols[idx])
        write_manifest(out.parent, args, {"input_points": int(len(pts)), "output_points": int(len(idx))})
    return EXIT_OK


def cmd_align(args) -> int:
    graph = io.read_graph(_require(args.input, "point-map directory"))
    sol = align(graph, iters=args.iters, lr=args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "alignment.json", sol.report())
    pts, conf = sol.cloud()
    io.write_cloud(out / "cloud.ply", pts, conf)
    write_manifest(out, args, {"objective": sol.objective})
    return EXIT_OK


def _fit_config(args, iterations: int) -> OptimConfig:
    return OptimConfig(iterations=iterations, lrs=default_lrs(args.extent), lam=args.lam,
                       optimize_poses=args.optimize_poses, freeze_gaussians=args.freeze_gaussians, seed=args.seed)


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "l1", "dssim", "recon", "acc", "total", "lambda"])
        for i, r in enumerate(trace):
            w.writerow([i, repr(r.l1), repr(r.dssim), repr(r.recon), repr(r.acc), repr(r.total), repr(r.lam)])


def cmd_fit(args) -> int:
    scene = io.read_scene(_require(args.scene, "scene"))
    medium = io.read_medium(_require(args.medium, "medium"))
    views = io.read_cameras(_require(args.cameras, "cameras"))
    truths = _load_images(args.images, len(views))
    iterations = args.iterations or PRESETS[args.preset]
    result = fit(scene, medium, views, truths, _fit_config(args, iterations))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_scene(out, result.scene)
    io.write_medium(out.with_name(out.stem + "_medium.json"), result.medium)
    io.write_cameras(out.with_name(out.stem + "_cameras.json"), result.views)
    _write_trace(out.with_name(out.stem + "_trace.csv"), result.trace + [result.final])
    write_manifest(out.parent, args, {"final_loss": result.final.as_dict()})
    return EXIT_OK


def _render_views(scene, medium, views, which, out: Path, separate: bool, gamma: bool, raw: bool, threads: int):
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in which:
        r = render(scene, medium, views[i], threads=threads)
        layers = [("rgb", r.rgb)] + ([("object", r.object_rgb), ("medium", r.medium_rgb)] if separate else [])
        for name, img in layers:
            p = out / f"view_{i:02d}_{name}.png"
            io.write_png(p, img, gamma)
            written.append(p)
        if raw:
            io.save_npy(out / f"view_{i:02d}_rgb.npy", r.rgb)
            io.save_npy(out / f"view_{i:02d}_depth.npy", r.depth)
            io.save_npy(out / f"view_{i:02d}_accumulation.npy", r.accumulation)
    return written


def cmd_render(args) -> int:
    scene = io.read_scene(_require(args.scene, "scene"))
    medium = io.read_medium(_require(args.medium, "medium"))
    views = io.read_cameras(_require(args.cameras, "cameras"))
    which = range(len(views)) if args.view is None else [args.view]
    if args.view is not None and not 0 <= args.view < len(views):
        raise InputError(f"view {args.view} out of range (0..{len(views) - 1})")
    _render_views(scene, medium, views, which, Path(args.out), args.separate, args.gamma, args.raw, args.threads)
    write_manifest(args.out, args)
    return EXIT_OK


def _metric(x: float):
    return "inf" if math.isinf(x) else x


def evaluate(a, b, accumulation=None, lam: float = DEFAULT_LAMBDA) -> dict:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    l1, ds = float(l1_loss(a, b)), float(dssim_loss(a, b))
    acc = float(acc_loss(accumulation)) if accumulation is not None else 0.0
    return {"l1": l1, "dssim": ds, "recon": l1 + ds, "acc": acc, "total": l1 + ds + lam * acc, "lambda": lam,
            "psnr": _metric(psnr(a, b)), "ssim": float(ssim(a, b))}


def cmd_eval(args) -> int:
    a = io.read_image(_require(args.a, "image"), args.gamma)
    b = io.read_image(_require(args.b, "image"), args.gamma)
    acc = np.load(_require(args.accumulation, "accumulation")) if args.accumulation else None
    report = evaluate(a, b, acc, args.lam)
    print(json.dumps(report, sort_keys=True))
    if args.out:
        io.write_json(Path(args.out) / "metrics.json", report)
        write_manifest(args.out, args)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise InputError(f"input directory not found: {src}")
    for need in ("cameras.json", "pointmaps/graph.json"):
        if not (src / need).exists():
            raise InputError(f"input directory lacks {need}")
    views = io.read_cameras(src / "cameras.json")
    images = _load_images(src / "degraded", len(views))
    graph = io.read_graph(src / "pointmaps")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sol = align(graph, iters=args.align_iters)
    scene = pipeline.initialize(graph, sol, images, views, args.voxel, args.min_confidence)
    medium = pipeline.initial_medium(images)
    io.write_scene(out / "init.ply", scene)
    t1 = time.perf_counter()
    iterations = args.iterations or PRESETS[args.preset]
    result = fit(scene, medium, views, images, _fit_config(args, iterations))
    t2 = time.perf_counter()
    io.write_scene(out / "scene.ply", result.scene)
    io.write_medium(out / "medium.json", result.medium)
    io.write_cameras(out / "cameras.json", result.views)
    _write_trace(out / "loss_trace.csv", result.trace + [result.final])
    _render_views(result.scene, result.medium, result.views, range(len(views)), out / "renders", True, False,
                  False, args.threads)
    per_view = []
    for i, v in enumerate(result.views):
        r = render(result.scene, result.medium, v, threads=args.threads)
        m = {"view": i, "psnr": _metric(psnr(r.rgb, images[i])), "ssim": float(ssim(r.rgb, images[i]))}
        clean = src / "clean"
        if clean.is_dir():
            c = _load_images(clean, len(views))[i]
            m["object_psnr"] = _metric(psnr(r.object_rgb, c))
        per_view.append(m)
    finite = [m["psnr"] for m in per_view if m["psnr"] != "inf"]
    metrics = {"views": per_view, "mean_psnr": float(np.mean(finite)) if finite else "inf",
               "final_loss": result.final.as_dict(), "gaussians": len(result.scene),
               "alignment_objective": sol.objective}
    io.write_json(out / "metrics.json", metrics)
    # wall-clock lives only in the manifest so other outputs stay byte-identical across runs
    write_manifest(out, args, {"timing_s": {"init": t1 - t0, "fit": t2 - t1}})
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aquasplat", description="Underwater Gaussian splatting with a water medium.")
    p.add_argument("--version", action="version", version=f"%(prog)s {version_string()}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str, out_required: bool = True):
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        sp.add_argument("--threads", type=int, default=1, help=f"worker cap; 1 is bitwise deterministic "
                                                               f"(env {ENV_THREADS})")
        sp.add_argument("--config", help="key=value file of flag defaults (flag names without dashes)")
        sp.add_argument("--out", required=out_required and not os.environ.get(ENV_OUT),
                        help=f"{out_help} (env {ENV_OUT})")
        sp.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    def fit_flags(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), default="M",
                        help="iteration budget: S=500, M=1000 (default M)")
        sp.add_argument("--iterations", type=int, default=None, help="explicit iteration count, overrides --preset")
        sp.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                        help=f"transparency-prior weight (default {DEFAULT_LAMBDA})")
        sp.add_argument("--optimize-poses", action="store_true", help="also refine camera extrinsics")
        sp.add_argument("--freeze-gaussians", action="store_true", help="optimise the medium only")
        sp.add_argument("--extent", type=float, default=1.0, help="scene extent scaling the position rate")

    sp = sub.add_parser("synth", help="generate a synthetic scene directory")
    common(sp, "output directory")
    sp.add_argument("--n-gaussians", type=int, default=50)
    sp.add_argument("--n-views", type=int, default=8)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--pointmap-resolution", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.01, help="point-map noise sigma")
    sp.add_argument("--sh-degree", type=int, default=0)
    sp.add_argument("--extent", type=float, default=1.0)
    sp.add_argument("--gamma", action="store_true", help="gamma-encode PNGs (raw .npy stays linear)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("downsample", help="confidence voxel downsampling of a cloud PLY or a point-map directory")
    common(sp, "output cloud PLY or point-map directory")
    sp.add_argument("input", help="cloud PLY or point-map directory")
    sp.add_argument("--voxel", type=float, required=True, help="voxel edge length")
    sp.set_defaults(func=cmd_downsample)

    sp = sub.add_parser("align", help="global alignment of pairwise point maps")
    common(sp, "output directory (alignment.json, cloud.ply)")
    sp.add_argument("input", help="point-map directory with graph.json")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("fit", help="optimise a scene against images")
    common(sp, "output scene PLY; sidecars are written next to it")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--medium", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--images", required=True, help="directory of view_XX.npy or view_XX.png")
    fit_flags(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("render", help="render views to PNG")
    common(sp, "output directory")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--medium", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--view", type=int, default=None, help="render one view (default all)")
    sp.add_argument("--separate", action="store_true", help="also write object-only and medium-only images")
    sp.add_argument("--gamma", action="store_true", help="gamma 2.2 encode PNGs")
    sp.add_argument("--raw", action="store_true", help="also dump rgb, depth and accumulation as .npy")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="compare two images; prints JSON metrics")
    common(sp, "optional directory for metrics.json", out_required=False)
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--accumulation", help=".npy accumulation map for the transparency term")
    sp.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    sp.add_argument("--gamma", action="store_true", help="inputs are gamma-encoded PNGs")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pipeline", help="align, initialise, fit and evaluate a synth-style directory")
    common(sp, "output directory")
    sp.add_argument("input", help="directory with cameras.json, degraded/ and pointmaps/")
    sp.add_argument("--voxel", type=float, default=0.05, help="voxel size for the fused cloud")
    sp.add_argument("--min-confidence", type=float, default=pipeline.MIN_CONFIDENCE)
    sp.add_argument("--align-iters", type=int, default=100)
    fit_flags(sp)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        apply_overrides(sub, args, argv)
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        torch.set_num_threads(args.threads)
        return args.func(args)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
