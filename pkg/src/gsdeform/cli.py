"""``gsdeform`` command line: synth, train, render, eval.

Exit codes: 0 success, 1 usage or parameter error, 2 data error, 3 numeric
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import PRESETS, camera_from_transform, generate_toy_scene, load_dnerf_dataset, write_png
from .errors import ContractError, DataError, NumericError, ParameterError, RangeError
from .metrics import psnr, ssim
from .training import TrainConfig, Trainer, coerce, config_from_dict, parse_config_text, train_loop
from .validation import check_time

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "GSD_THREADS"

log = logging.getLogger("gsdeform")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _apply_thread_cap() -> None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = PRESETS[args.preset](args.seed)
    if args.frames is not None:
        spec = dataclasses.replace(spec, n_frames=args.frames)
    if args.resolution is not None:
        spec = dataclasses.replace(spec, resolution=args.resolution)
    ds = generate_toy_scene(spec, args.out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test frames to {args.out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _config_overrides(args) -> dict:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), {f.name: f.type for f in dataclasses.fields(TrainConfig)}))
    for key in TrainConfig.keys():
        flag = getattr(args, f"cfg_{key}", None)
        if flag is not None:
            values[key] = flag
    if args.iters is not None:
        values["iterations"] = args.iters
    return values


def cmd_train(args) -> int:
    overrides = _config_overrides(args)
    dataset = load_dnerf_dataset(args.data)
    cfg = None if args.resume else config_from_dict(overrides).validate()
    out = Path(args.out)

    def progress(rec):
        if rec.iteration % 100 == 0:
            log.info("iter %d loss %.5f psnr %.2f gaussians %d", rec.iteration, rec.loss.total, rec.psnr, rec.num_gaussians)

    trainer = train_loop(dataset, cfg, out, resume=args.resume, progress=progress, overrides=overrides)
    print(f"trained to iteration {trainer.iteration} with {len(trainer.cloud)} Gaussians; checkpoint {out / 'final.gsdw'}")
    return EXIT_OK


# -- render --------------------------------------------------------------------


def _read_pose(path, resolution):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"pose file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"pose file {path}: malformed JSON ({exc})") from exc
    for key in ("transform_matrix", "camera_angle_x"):
        if key not in doc:
            raise DataError(f"pose file {path} lacks {key!r}")
    height, width = resolution
    return camera_from_transform(
        np.asarray(doc["transform_matrix"], dtype=np.float64),
        float(doc["camera_angle_x"]),
        int(doc.get("width", width)),
        int(doc.get("height", height)),
    )


def cmd_render(args) -> int:
    times = [check_time(t) for t in args.time]
    dataset = load_dnerf_dataset(args.data) if args.data else None
    trainer = Trainer.load(args.checkpoint, dataset)
    if args.pose:
        cameras = [_read_pose(args.pose, trainer.dataset.resolution)]
    else:
        pool = trainer.dataset.test if args.split == "test" else trainer.frames
        if not 0 <= args.camera < len(pool):
            raise RangeError(f"camera index {args.camera} outside 0..{len(pool) - 1}")
        cameras = [pool[args.camera].camera]
    out = Path(args.out)
    many = len(times) > 1
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for t in times:
        image = trainer.render_image(cameras[0], t)
        target = out / f"t_{t:.4f}.png" if many else out
        if args.raw:
            np.save(target.with_suffix(".npy"), image.astype(np.float32))
        write_png(target, image)
        print(target)
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

EVAL_HEADER = ["name", "t", "psnr", "ssim"]


def cmd_eval(args) -> int:
    dataset = load_dnerf_dataset(args.dataset)
    trainer = Trainer.load(args.checkpoint, dataset)
    frames = dataset.test if args.split == "test" else dataset.train
    rows = []
    for f in frames:
        image = trainer.render_image(f.camera, f.t)
        rows.append([f.name, f"{f.t:.6f}", psnr(image, f.image), ssim(image, f.image)])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EVAL_HEADER)
            writer.writerows(rows)
    print(f"{'name':<12} {'t':>8} {'psnr':>8} {'ssim':>7}")
    for name, t, p, s in rows:
        print(f"{name:<12} {t:>8} {p:>8.3f} {s:>7.4f}")
    if rows:
        print(f"{'mean':<12} {'':>8} {np.mean([r[2] for r in rows]):>8.3f} {np.mean([r[3] for r in rows]):>7.4f}")
    else:
        print(f"no {args.split} frames in {args.dataset}; nothing to evaluate")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsdeform", description="Deformable Gaussian splatting on CPU.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write an analytic toy scene in the D-NeRF layout")
    p.add_argument("--preset", choices=sorted(PRESETS), default="sphere-translate")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, help="number of training frames")
    p.add_argument("--resolution", type=int, help="square image size in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimise a scene; flags override the config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--iters", type=int, help="alias for --iterations")
    p.add_argument("--resume", help="checkpoint to continue from")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        flags = [f"--{f.name.replace('_', '-')}"] + (["--lambda"] if f.name == "lam" else [])
        p.add_argument(
            *flags,
            dest=f"cfg_{f.name}",
            type=lambda raw, ft=f.type: coerce(ft, raw),
            metavar=f.name.upper(),
            help=f"default {getattr(defaults, f.name)}",
        )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint at one or more timestamps")
    p.add_argument("checkpoint")
    p.add_argument("--time", type=float, nargs="+", required=True)
    cam = p.add_mutually_exclusive_group()
    cam.add_argument("--camera", type=int, default=0, help="index into the chosen split")
    cam.add_argument("--pose", help="JSON with transform_matrix and camera_angle_x")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
    p.add_argument("--out", required=True, help="PNG path, or a directory for several timestamps")
    p.add_argument("--raw", action="store_true", help="also write float32 .npy images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-frame PSNR/SSIM of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except (ParameterError, RangeError, ContractError) as exc:
        print(f"gsdeform: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"gsdeform: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"gsdeform: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
