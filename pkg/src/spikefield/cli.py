"""``spikefield`` command line.

Exit status: 0 on success, 1 on usage errors, 2 on data or format errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .config import ConfigError
from .core import (
    FormatError, image_suffix, list_images, load_stream, load_trajectory, read_image, save_stream,
    stack_frames, write_image,
)
from .dataset import OrbitParams, build_dataset, desk_scene, format_scene, parse_scene
from .field import DEFAULT_SAMPLES, load_grid, render_image, save_grid
from .metrics import psnr, ssim
from .recon import ReconConfig, build_mask, reconstruct
from .sim import StartupMode, encode_sequence
from .spiking import generate_spikes
from .train import TrainConfig, ValidationSet, train, write_log

log = logging.getLogger("spikefield")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _startup(text: str) -> StartupMode:
    try:
        return StartupMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _seeded(mode: StartupMode, seed: int | None) -> StartupMode:
    # a global --seed replaces the seed of a random startup
    return StartupMode.random(seed) if (seed is not None and mode.is_random) else mode


def _write_frame(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame, dtype=np.float64)
    write_image(path, frame, max(1.0, float(frame.max(initial=0.0))))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.scene == "desk":
        spec, params = desk_scene(), OrbitParams()
    else:
        spec, params = parse_scene(Path(args.scene).read_text(encoding="utf-8"))
    overrides = {}
    if args.views is not None:
        overrides["n_views"] = args.views
    if args.duration_s is not None:
        overrides["duration_s"] = args.duration_s
    if overrides:
        params = OrbitParams(**{**params.__dict__, **overrides})
    mode = _seeded(args.startup, args.seed)
    ds = build_dataset(spec, params, args.phi, mode, n_samples=args.samples, out_dir=args.out)
    (Path(args.out) / "scene.txt").write_text(format_scene(spec, params), encoding="utf-8")
    log.info("simulated %d frames (%s) into %s", ds.stream.n_frames, mode, args.out)
    return 0


def cmd_encode(args) -> int:
    paths = list_images(args.frames)
    if not paths:
        raise FormatError(f"no .pgm/.ppm frames in {args.frames}")
    frames = stack_frames(read_image(p) for p in paths)
    stream = encode_sequence(frames, args.phi, _seeded(args.startup, args.seed), args.period_us)
    save_stream(stream, args.out)
    log.info("encoded %d frames into %s", stream.n_frames, args.out)
    return 0


def _frame_index(stream, i: int) -> int:
    if not 0 <= i < stream.n_frames:
        raise UsageError(f"frame {i} out of range for {stream.n_frames} frames")
    return i


def cmd_decode(args) -> int:
    stream = load_stream(args.inp)
    bits = stream.frame(_frame_index(stream, args.frame))
    write_image(args.out, bits.astype(np.float64), 1.0)
    return 0


def cmd_reconstruct(args) -> int:
    stream = load_stream(args.inp)
    config = ReconConfig(method=args.method, window_w=args.window, max_isi=args.max_isi)
    img = reconstruct(stream, _frame_index(stream, args.center), config)
    write_image(args.out, img, max(1.0, stream.threshold))
    return 0


def cmd_mask(args) -> int:
    stream = load_stream(args.inp)
    mask = build_mask(stream, _frame_index(stream, args.center), args.n)
    write_image(args.out, mask.astype(np.float64), 1.0)
    return 0


def _validation(args, channels: int) -> ValidationSet | None:
    if not args.val_traj:
        return None
    if not args.val_images:
        raise UsageError("--val-traj needs --val-images")
    traj = load_trajectory(args.val_traj)
    images = stack_frames(read_image(p) for p in list_images(args.val_images))
    if len(images) != len(traj) or images.shape[-1] != channels:
        raise FormatError("validation images do not match the validation trajectory")
    return ValidationSet(traj, images)


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig(**{**config.__dict__, "seed": args.seed})
    stream = load_stream(args.spk)
    traj = load_trajectory(args.traj)
    val = _validation(args, stream.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")

    def progress(row, elapsed):
        if row.iter % 100 == 0 or row.iter == config.n_iterations:
            extra = "" if row.psnr_val is None else f" psnr_val {row.psnr_val:.2f}"
            log.info("iter %d loss %.6f%s (%.0fs)", row.iter, row.loss_total, extra, elapsed)

    grid, history = train(stream, traj, config, val, progress=progress)
    save_grid(grid, out / "grid.vxgr")
    write_log(history, out / "log.csv")
    return 0


def _pose_ref(text: str):
    path, sep, index = text.rpartition(":")
    if not sep or not path:
        raise UsageError(f"--pose expects <traj>:<index>, got {text!r}")
    try:
        i = int(index)
    except ValueError:
        raise UsageError(f"bad pose index {index!r}") from None
    traj = load_trajectory(path)
    if not 0 <= i < len(traj):
        raise UsageError(f"pose {i} out of range for {len(traj)} poses")
    return traj[i]


def cmd_render(args) -> int:
    grid = load_grid(args.ckpt)
    pose = _pose_ref(args.pose)
    write_image(args.out, render_image(grid, pose, args.samples), 1.0)
    return 0


def cmd_spikes(args) -> int:
    grid = load_grid(args.ckpt)
    traj = load_trajectory(args.traj)
    stream = generate_spikes(grid, traj, args.phi, _seeded(args.startup, args.seed), args.samples)
    save_stream(stream, args.out)
    return 0


def evaluate_dirs(pred_dir, gt_dir) -> list[tuple[str, float, float]]:
    pred = {p.name: p for p in list_images(pred_dir)}
    gt = {p.name: p for p in list_images(gt_dir)}
    if not gt:
        raise FormatError(f"no images in {gt_dir}")
    if set(pred) != set(gt):
        missing = sorted(set(gt) ^ set(pred))
        raise FormatError(f"prediction and ground-truth image names differ: {missing[:5]}")
    rows = []
    for name in sorted(gt):
        a, b = read_image(pred[name]), read_image(gt[name])
        if a.shape != b.shape:
            raise FormatError(f"{name}: shape {a.shape} vs {b.shape}")
        rows.append((name, psnr(a, b), ssim(a, b)))
    return rows


def cmd_eval(args) -> int:
    rows = evaluate_dirs(args.pred, args.gt)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image", "psnr", "ssim"))
        for name, p, s in rows:
            w.writerow((name, f"{p:.6f}", f"{s:.6f}"))
        w.writerow(("mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"))
    log.info("mean PSNR %.3f SSIM %.4f over %d images", np.mean([r[1] for r in rows]),
             np.mean([r[2] for r in rows]), len(rows))
    return 0


def cmd_heldout(args) -> int:
    """Render every pose of a trajectory into a directory (for eval)."""
    grid = load_grid(args.ckpt)
    traj = load_trajectory(args.traj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = image_suffix(grid.channels)
    for i, pose in enumerate(traj):
        write_image(out / f"{i:03d}{suffix}", render_image(grid, pose, args.samples), 1.0)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikefield", description="Spike-camera radiance-field toolkit.")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    p.add_argument("--threads", type=int, default=None, help="render worker threads (default: all cores)")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a synthetic scene and record its spike stream")
    s.add_argument("--scene", default="desk", help="scene file, or 'desk' for the built-in scene")
    s.add_argument("--views", type=int)
    s.add_argument("--duration-s", type=float)
    s.add_argument("--phi", type=float, default=1.0)
    s.add_argument("--startup", type=_startup, default=StartupMode.random(0))
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("encode", help="encode a directory of intensity frames into spikes")
    s.add_argument("--frames", required=True)
    s.add_argument("--phi", type=float, default=1.0)
    s.add_argument("--startup", type=_startup, default=StartupMode.zero())
    s.add_argument("--period-us", type=int, default=25)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="write one spike frame as a 0/255 image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("reconstruct", help="reconstruct an intensity image from spikes")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--method", choices=("tfp", "tfi"), default="tfp")
    s.add_argument("--center", type=int, required=True)
    s.add_argument("--window", type=int, default=31)
    s.add_argument("--max-isi", type=int, default=32)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("mask", help="spike mask: OR of frames center-n..center+n")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--center", type=int, required=True)
    s.add_argument("-n", type=int, default=2)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("train", help="fit a voxel field to a spike stream")
    s.add_argument("--spk", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--config")
    s.add_argument("--val-traj", help="held-out poses for psnr_val")
    s.add_argument("--val-images", help="directory of held-out ground-truth images")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one view from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pose", required=True, help="<trajectory file>:<index>")
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("render-all", help="render every pose of a trajectory into a directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_heldout)

    s = sub.add_parser("spikes", help="generate a spike stream from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--phi", type=float, default=1.0)
    s.add_argument("--startup", type=_startup, default=StartupMode.random(0))
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_spikes)

    s = sub.add_parser("eval", help="PSNR/SSIM of predicted against ground-truth images")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("spikefield: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    kernels.set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spikefield {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ConfigError, ValueError, OSError) as exc:
        print(f"spikefield {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
