"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --rays 4096 --samples 128 --repeat 3
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from spikefield import kernels
from spikefield.field import VoxelGrid, ray_box


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def workload(args):
    rng = np.random.default_rng(args.seed)
    r, c = args.resolution, 3
    grid = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(-1, 2, (r, r, r)), rng.normal(0, 1, (r, r, r, c)))
    o = rng.normal(size=(args.rays, 3))
    o *= 4.0 / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.8, 0.8, (args.rays, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf = ray_box(o, d, grid.bbox_min, grid.bbox_max)
    offs = rng.random((args.rays, args.samples))
    adj = rng.normal(size=(args.rays, c))
    frames = rng.random((args.frames, args.pixels)) * 0.9
    return grid, o, d, tn, tf, offs, adj, frames


def run(args):
    grid, o, d, tn, tf, offs, adj, frames = workload(args)
    common = (grid.density_raw, grid.color_raw, grid.bbox_min, grid.bbox_max, o, d, tn, tf, offs, args.samples)
    rows = []
    for name, mod in kernels.available().items():
        gd, gc = np.zeros_like(grid.density_raw), np.zeros_like(grid.color_raw)
        fwd = best_of(lambda: mod.render_forward(*common, False, args.threads), args.repeat)
        bwd = best_of(lambda: mod.render_backward(*common, adj, gd, gc), args.repeat)
        enc = best_of(lambda: mod.encode_frames(frames, np.zeros(args.pixels), 1.0 - 1e-12, 1.0,
                                                2.0 * (1 - 1e-9)), args.repeat)
        rows.append((name, fwd, bwd, enc))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--pixels", type=int, default=64 * 64 * 3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rows = run(args)
    print(f"{args.rays} rays x {args.samples} samples, R={args.resolution}; "
          f"encode {args.frames} frames x {args.pixels} pixels; best of {args.repeat}")
    print(f"{'backend':<8} {'forward s':>10} {'backward s':>11} {'encode s':>9}")
    for name, fwd, bwd, enc in rows:
        print(f"{name:<8} {fwd:>10.4f} {bwd:>11.4f} {enc:>9.4f}")
    if len(rows) == 2:
        (_, f0, b0, e0), (_, f1, b1, e1) = rows
        print(f"speedup  {f0 / f1:>10.1f}x {b0 / b1:>10.1f}x {e0 / e1:>8.1f}x")
    else:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
