"""Batch command-line interface.

Subcommands: generate-synthetic, train, render, eval, export-splat,
check-gradients. Exit codes: 0 success, 1 usage error, 2 data error,
3 verification failure. Every subcommand accepts --seed and --threads;
threads affect wall time only, never output bits. Output tables are
comma-separated with a header row; --verbose adds progress chatter on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields, replace

import numpy as np

from . import gaussians as gm
from . import scene_io
from .gradients import GRADCHECK_CONFIG, check_gradients, well_conditioned_scene
from .oracle import QuadratureConfig, render_bruteforce, render_quadrature
from .rasterizer import RenderConfig, render
from .trainer import TrainConfig, psnr, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (wall time only; outputs are bit-identical)")
    p.add_argument("--verbose", action="store_true", help="progress chatter on stderr")


def _parse_background(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--background needs R,G,B, got '{text}'")
    return tuple(float(v) for v in parts)


def _parse_schedule(text):
    out = []
    if not text:
        return tuple(out)
    for item in text.split(","):
        it, _, deg = item.partition(":")
        try:
            out.append((int(it), int(deg)))
        except ValueError:
            raise UsageError(f"--sh-schedule items must be ITER:DEGREE, got '{item}'")
    return tuple(out)


def build_parser() -> _Parser:
    parser = _Parser(prog="tinysplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("generate-synthetic", help="write a seeded synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=20, help="number of Gaussians")
    p.add_argument("--cameras", type=int, default=40, help="number of cameras")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (manifest.json, points.ply)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")
    p.add_argument("--holdout-every", type=int, default=5,
                   help="hold out every k-th view (0 disables)")
    p.add_argument("--lr-mean", type=float, default=None)
    p.add_argument("--lr-scale", type=float, default=None)
    p.add_argument("--lr-quat", type=float, default=None)
    p.add_argument("--lr-opacity", type=float, default=None)
    p.add_argument("--lr-sh", type=float, default=None)
    p.add_argument("--densify-start", type=int, default=None)
    p.add_argument("--densify-end", type=int, default=None)
    p.add_argument("--densify-interval", type=int, default=None)
    p.add_argument("--grad-threshold", type=float, default=None)
    p.add_argument("--scale-threshold", type=float, default=None)
    p.add_argument("--prune-opacity", type=float, default=None)
    p.add_argument("--split-factor", type=float, default=None)
    p.add_argument("--sh-degree", type=int, default=None, help="stored SH degree")
    p.add_argument("--sh-schedule", type=str, default=None, help="ITER:DEG,ITER:DEG,...")
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--background", type=str, default=None, help="R,G,B in [0,1]")
    p.add_argument("--tile-size", type=int, default=None)

    p = sub.add_parser("render", help="render a checkpoint from a pose")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--engine", choices=("tiled", "bruteforce", "quadrature"), default="tiled")
    p.add_argument("--data", default=None, help="dataset directory (for --pose-index)")
    p.add_argument("--pose-index", type=int, default=None)
    p.add_argument("--pose-file", default=None, help="JSON pose file (one manifest frame)")
    p.add_argument("--background", type=str, default="0,0,0")
    p.add_argument("--samples", type=int, default=512, help="quadrature samples per ray")
    p.add_argument("--tile-size", type=int, default=16)

    p = sub.add_parser("eval", help="per-view PSNR table for a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--views", choices=("all", "train", "holdout"), default="all")
    p.add_argument("--holdout-every", type=int, default=5)
    p.add_argument("--background", type=str, default="0,0,0")
    p.add_argument("--tile-size", type=int, default=16)

    p = sub.add_parser("export-splat", help="export a checkpoint to 32-byte splat records")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("check-gradients", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--count", type=int, default=6, help="Gaussians in the test scene (<= 64)")
    p.add_argument("--size", type=int, default=16, help="image width and height")
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _note(args, msg):
    if args.verbose:
        print(msg, file=sys.stderr)


def _cmd_generate(args) -> int:
    scene_io.generate_synthetic(
        seed=args.seed,
        count=args.count,
        camera_count=args.cameras,
        width=args.width,
        height=args.height,
        out_dir=args.out,
        render_config=RenderConfig(threads=args.threads),
    )
    _note(args, f"wrote dataset with {args.cameras} views to {args.out}")
    print(f"dataset,{args.out},{args.count},{args.cameras}")
    return EXIT_OK


class _SplitDataset:
    """View of a dataset restricted to a subset of frame indices."""

    def __init__(self, base, indices):
        self.base = base
        self.indices = list(indices)
        self.images = [base.images[i] for i in self.indices]
        self.points = base.points
        self.scene_unit = base.scene_unit

    def camera(self, i):
        return self.base.camera(self.indices[i])


def split_views(n_views: int, holdout_every: int):
    if holdout_every and holdout_every > 0:
        holdout = [i for i in range(n_views) if i % holdout_every == holdout_every - 1]
        kept = [i for i in range(n_views) if i % holdout_every != holdout_every - 1]
    else:
        holdout, kept = [], list(range(n_views))
    return kept, holdout


def _train_config_from_args(args) -> TrainConfig:
    # Precedence: TrainConfig defaults < config file < explicit flags; the
    # config is validated once, after everything is merged.
    defaults = TrainConfig()
    values = {f.name: getattr(defaults, f.name) for f in dataclass_fields(TrainConfig)}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            overrides = json.load(f)
        bad = set(overrides) - set(values)
        if bad:
            raise ValueError(f"unknown TrainConfig keys in {args.config}: {sorted(bad)}")
        if "sh_degree_schedule" in overrides:
            overrides["sh_degree_schedule"] = tuple(
                (int(a), int(b)) for a, b in overrides["sh_degree_schedule"]
            )
        if "background" in overrides:
            overrides["background"] = tuple(overrides["background"])
        values.update(overrides)
    flag_map = {
        "iterations": args.iters,
        "lr_mean": args.lr_mean,
        "lr_log_scale": args.lr_scale,
        "lr_quat": args.lr_quat,
        "lr_opacity": args.lr_opacity,
        "lr_sh": args.lr_sh,
        "densify_start": args.densify_start,
        "densify_end": args.densify_end,
        "densify_interval": args.densify_interval,
        "grad_threshold": args.grad_threshold,
        "scale_threshold": args.scale_threshold,
        "prune_opacity": args.prune_opacity,
        "split_factor": args.split_factor,
        "max_sh_degree": args.sh_degree,
        "eval_interval": args.eval_interval,
    }
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if args.sh_schedule is not None:
        values["sh_degree_schedule"] = _parse_schedule(args.sh_schedule)
    if args.background is not None:
        values["background"] = _parse_background(args.background)
    values["seed"] = args.seed
    rcfg = values["render"]
    if args.tile_size is not None:
        rcfg = replace(rcfg, tile_size=args.tile_size)
    values["render"] = replace(rcfg, threads=args.threads)
    # Keep the densification window inside the run without forcing flags.
    values["densify_end"] = min(values["densify_end"], values["iterations"])
    values["densify_start"] = min(values["densify_start"], values["densify_end"])
    return TrainConfig(**values)


def _cmd_train(args) -> int:
    dataset = scene_io.load_dataset(args.data, require_points=True)
    cfg = _train_config_from_args(args)
    kept, _ = split_views(len(dataset.images), args.holdout_every)
    subset = _SplitDataset(dataset, kept)
    _note(args, f"training on {len(kept)} of {len(dataset.images)} views")
    print("iter,loss,psnr,gaussian_count,wall_ms")

    def emit(rec):
        print(
            f"{rec.iteration},{rec.loss:.8e},{rec.psnr:.4f},"
            f"{rec.gaussian_count},{rec.wall_ms:.3f}"
        )

    scene, _records = train(subset, cfg, on_record=emit)
    scene_io.save_checkpoint(scene, args.out)
    _note(args, f"saved checkpoint with {scene.count} gaussians to {args.out}")
    return EXIT_OK


def _camera_for_render(args) -> gm.Camera:
    if (args.pose_index is None) == (args.pose_file is None):
        raise UsageError("render needs exactly one of --pose-index or --pose-file")
    if args.pose_index is not None:
        if args.data is None:
            raise UsageError("--pose-index requires --data")
        manifest, _ = scene_io.load_manifest(
            f"{args.data}/manifest.json", load_images=False
        )
        if not (0 <= args.pose_index < len(manifest.frames)):
            raise ValueError(
                f"--pose-index {args.pose_index} out of range "
                f"(dataset has {len(manifest.frames)} frames)"
            )
        return scene_io.camera_from_frame(manifest.frames[args.pose_index])
    return scene_io.camera_from_frame(scene_io.load_pose_file(args.pose_file))


def _cmd_render(args) -> int:
    scene = scene_io.load_checkpoint(args.ckpt)
    scene.background = np.asarray(_parse_background(args.background), dtype=np.float32)
    cam = _camera_for_render(args)
    config = RenderConfig(tile_size=args.tile_size, threads=args.threads)
    if args.engine == "tiled":
        image = render(scene, cam, config).color
    elif args.engine == "bruteforce":
        image = render_bruteforce(scene, cam, config).color
    else:
        qcfg = QuadratureConfig.for_scene(scene, cam, samples=args.samples)
        image = render_quadrature(scene, cam, qcfg, threads=args.threads)
    scene_io.save_ppm(args.out, image)
    _note(args, f"rendered {cam.width}x{cam.height} with {args.engine} engine")
    print(f"rendered,{args.out},{args.engine}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    scene = scene_io.load_checkpoint(args.ckpt)
    scene.background = np.asarray(_parse_background(args.background), dtype=np.float32)
    dataset = scene_io.load_dataset(args.data)
    kept, holdout = split_views(len(dataset.images), args.holdout_every)
    view_ids = {"all": list(range(len(dataset.images))), "train": kept, "holdout": holdout}[args.views]
    if not view_ids:
        raise ValueError(f"no views selected for --views {args.views}")
    config = RenderConfig(tile_size=args.tile_size, threads=args.threads)
    print("view,psnr")
    values = []
    for i in view_ids:
        out = render(scene, dataset.camera(i), config)
        value = psnr(np.clip(out.color, 0.0, 1.0), dataset.images[i])
        values.append(value)
        print(f"{i},{value:.4f}")
    print(f"mean,{float(np.mean(values)):.4f}")
    return EXIT_OK


def _cmd_export(args) -> int:
    scene = scene_io.load_checkpoint(args.ckpt)
    scene_io.export_splat(scene, args.out)
    print(f"exported,{args.out},{scene.count}")
    return EXIT_OK


def _cmd_check_gradients(args) -> int:
    if args.count > 64:
        raise ValueError("check-gradients supports at most 64 Gaussians")
    scene, cam = well_conditioned_scene(
        args.seed, count=args.count, width=args.size, height=args.size,
        sh_degree=args.sh_degree,
    )
    config = replace(GRADCHECK_CONFIG, threads=args.threads)
    report = check_gradients(scene, cam, config, step=args.step, tolerance=args.tol)
    print("class,max_rel_err,status")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY


_COMMANDS = {
    "generate-synthetic": _cmd_generate,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "export-splat": _cmd_export,
    "check-gradients": _cmd_check_gradients,
}


def run(argv) -> int:
    """Parse argv (no program name) and execute; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except (ValueError, OSError, json.JSONDecodeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
