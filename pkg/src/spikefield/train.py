"""Fitting a voxel radiance field to spike supervision.

Two terms drive the fit: a reconstruction loss between rendered pixels and
spike-masked reconstructed images, and a spike loss between spikes generated
from rendered intensities and the recorded stream. Spike generation is a hard
threshold; its gradient is relaxed to the window-summed rendered intensity
(every frame of the window receives the sign of the count mismatch).
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import config as cfg
from .core import SpikeStream, Trajectory
from .field import (
    DEFAULT_SAMPLES, GridGrad, VoxelGrid, backward_rays, camera_rays, ray_box, render_image,
    render_rays,
)
from .metrics import psnr
from .recon import ReconConfig, apply_mask, build_mask, reconstruct
from .sim import _encode_block
from .spiking import default_settle_frames, settle_prefix

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "loss_recon", "loss_spike", "loss_total", "psnr_val")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 0.3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_iterations: int = 2000
    rays_per_batch: int = 2048
    spike_window_frames: int = 32
    spike_lattice_stride: int = 8
    mask_n: int = 2
    use_mask: bool = True
    unmasked: str = "zero"
    # a short window keeps motion blur in the targets small at 200 views
    recon: ReconConfig = ReconConfig(window_w=7)
    recon_stride: int = 1
    settle_frames: int = -1
    n_samples: int = DEFAULT_SAMPLES
    resolution: int = 64
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    val_every: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        positive = ("learning_rate", "adam_eps", "rays_per_batch", "spike_lattice_stride",
                    "recon_stride", "n_samples", "val_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if self.spike_window_frames < 2:
            raise ValueError("spike_window_frames must be >= 2")
        if self.mask_n < 0:
            raise ValueError("mask_n must be >= 0")
        if self.unmasked not in ("zero", "ignore"):
            raise ValueError("unmasked must be 'zero' or 'ignore'")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")

    # -- key = value file -------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        top, sections = cfg.parse_keyvalue(text)
        if sections:
            raise cfg.ConfigError("training config takes no [sections]")
        kw: dict = {}
        recon = {}
        names = {f.name: f for f in fields(cls)}
        for key, value in top.items():
            if key.startswith("recon_") and key != "recon_stride":
                recon[key[len("recon_"):]] = value
                continue
            if key == "lambda":
                key = "lam"
            if key not in names:
                raise cfg.ConfigError(f"unknown training key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                kw[key] = cfg.boolean(value)
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            elif isinstance(default, tuple):
                kw[key] = cfg.vec3(value)
            else:
                kw[key] = value
        if recon:
            base = ReconConfig()
            kw["recon"] = ReconConfig(
                method=recon.pop("method", base.method),
                window_w=int(recon.pop("window_w", base.window_w)),
                max_isi=int(recon.pop("max_isi", base.max_isi)),
            )
            if recon:
                raise cfg.ConfigError(f"unknown recon keys {sorted(recon)}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "recon":
                lines += [f"recon_method = {v.method}", f"recon_window_w = {v.window_w}",
                          f"recon_max_isi = {v.max_isi}"]
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = " + " ".join(f"{x:.17g}" for x in v))
            elif isinstance(v, bool):
                lines.append(f"{f.name} = {'true' if v else 'false'}")
            elif isinstance(v, float):
                lines.append(f"{f.name} = {v:.17g}")
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_recon(pred, target, mask, unmasked: str = "ignore") -> tuple[float, np.ndarray]:
    """Mean squared error against masked reconstructions, with its adjoint.

    ``unmasked="ignore"`` averages over masked-in elements only (others get a
    zero adjoint); ``"zero"`` treats the masked target as zero outside the mask
    and averages over every element.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask), pred.shape)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if unmasked == "ignore":
        sel = mask.astype(bool)
        count = int(sel.sum())
        diff = np.where(sel, pred - target, 0.0)
    elif unmasked == "zero":
        count = pred.size
        diff = pred - np.where(mask.astype(bool), target, 0.0)
    else:
        raise ValueError("unmasked must be 'ignore' or 'zero'")
    if count == 0:
        return 0.0, np.zeros_like(pred)
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def hard_counts(frames: np.ndarray, phi: float) -> np.ndarray:
    """Spike counts over axis 0 from a zero-start accumulator."""
    frames = np.asarray(frames, dtype=np.float64)
    residual = np.zeros(frames.shape[1:])
    bits, _ = _encode_block(frames, residual, phi)
    return bits.sum(axis=0, dtype=np.int64)


def loss_spike(pred_frames, gt_bits, phi: float) -> tuple[float, np.ndarray]:
    """Count mismatch between generated and recorded spikes over a window.

    ``pred_frames`` are rendered intensities and ``gt_bits`` recorded spikes,
    both shaped (window, ...). The value is mean |count_pred - count_gt| /
    window; the adjoint is sign(count_pred - count_gt) / (phi * window * n) at
    every frame, where n counts the (ray, channel) elements.
    """
    pred_frames = np.asarray(pred_frames, dtype=np.float64)
    gt_bits = np.asarray(gt_bits)
    if pred_frames.shape != gt_bits.shape:
        raise ValueError(f"window shapes differ: {pred_frames.shape} vs {gt_bits.shape}")
    window = pred_frames.shape[0]
    n = int(np.prod(pred_frames.shape[1:]))
    if window == 0 or n == 0:
        return 0.0, np.zeros_like(pred_frames)
    diff = hard_counts(pred_frames, phi) - gt_bits.sum(axis=0, dtype=np.int64)
    value = float(np.abs(diff).sum() / (window * n))
    adj = np.broadcast_to(np.sign(diff) / (phi * window * n), pred_frames.shape).copy()
    return value, adj


def total_loss(recon: float, spike: float, lam: float) -> float:
    return recon + lam * spike


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    first_moment: list
    second_moment: list
    step_count: int = 0

    @classmethod
    def like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {k} shape {p.shape} != grad shape {g.shape}")
        if not np.isfinite(g).all():
            bad = tuple(int(i) for i in np.unravel_index(int(np.flatnonzero(~np.isfinite(g))[0]), g.shape))
            raise FloatingPointError(f"non-finite gradient in parameter {k} at index {bad}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class ValidationSet:
    poses: Trajectory
    images: np.ndarray  # (V, H, W, C)


@dataclass
class LogRow:
    iter: int
    loss_recon: float
    loss_spike: float | None
    loss_total: float
    psnr_val: float | None = None


@dataclass
class _ReconTargets:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    target: np.ndarray
    mask: np.ndarray


def _recon_targets(stream: SpikeStream, traj: Trajectory, config: TrainConfig,
                   bmin: np.ndarray, bmax: np.ndarray, images=None) -> _ReconTargets:
    """Rays, masked targets and masks for every supervised pixel that meets the bbox."""
    keep_o, keep_d, keep_tn, keep_tf, keep_t, keep_m = [], [], [], [], [], []
    for i in range(0, stream.n_frames, config.recon_stride):
        if images is not None:
            img = np.asarray(images[i], dtype=np.float64)
        else:
            img = reconstruct(stream, i, config.recon)
        if images is None and config.use_mask:
            mask = build_mask(stream, i, config.mask_n)
        else:
            mask = np.ones(img.shape, dtype=np.uint8)
        if config.unmasked == "zero":
            img = apply_mask(img, mask)
        o, d = camera_rays(traj[i])
        tn, tf = ray_box(o, d, bmin, bmax)
        hit = tf > tn
        c = img.shape[-1]
        m = mask.reshape(-1, c)
        if config.unmasked == "ignore":
            hit &= m.any(axis=1)
        keep_o.append(o[hit]); keep_d.append(d[hit]); keep_tn.append(tn[hit]); keep_tf.append(tf[hit])
        keep_t.append(img.reshape(-1, c)[hit]); keep_m.append(m[hit])
    return _ReconTargets(*(np.ascontiguousarray(np.concatenate(a)) for a in
                           (keep_o, keep_d, keep_tn, keep_tf, keep_t, keep_m)))


class _SpikeSchedule:
    """Deterministic spike-loss windows: round-robin over window starts, then lattice offsets."""

    def __init__(self, n_frames: int, settle: int, window: int, stride: int, height: int, width: int):
        last = n_frames - window
        if last < settle:
            raise ValueError(
                f"stream of {n_frames} frames too short for a {window}-frame spike window after "
                f"{settle} settle frames"
            )
        self.starts = list(range(settle, last + 1, window))
        self.stride = stride
        self.height, self.width = height, width

    def __call__(self, it: int) -> tuple[int, np.ndarray]:
        start = self.starts[it % len(self.starts)]
        phase = (it // len(self.starts)) % (self.stride * self.stride)
        # coprime step walks every lattice offset
        phase = (phase * 5) % (self.stride * self.stride) if math.gcd(5, self.stride) == 1 else phase
        oy, ox = divmod(phase, self.stride)
        ys, xs = np.mgrid[oy : self.height : self.stride, ox : self.width : self.stride]
        return start, np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def evaluate(grid: VoxelGrid, val: ValidationSet, n_samples: int = DEFAULT_SAMPLES) -> float:
    """Mean PSNR over the validation poses."""
    return float(np.mean([psnr(render_image(grid, p, n_samples), img) for p, img in zip(val.poses, val.images)]))


def train(stream: SpikeStream, trajectory: Trajectory, config: TrainConfig = TrainConfig(),
          val: ValidationSet | None = None, init_grid: VoxelGrid | None = None,
          progress=None, targets=None) -> tuple[VoxelGrid, list[LogRow]]:
    """Fit a voxel grid to a spike stream recorded along ``trajectory``.

    ``targets`` (N, H, W, C) replaces the masked reconstructions as the
    reconstruction-loss supervision, with every pixel supervised; used to
    check the optimizer against ground-truth renders.
    """
    if stream.n_frames == 0 or not len(trajectory):
        raise ValueError("empty dataset")
    trajectory.check_aligned(stream)
    phi = stream.threshold
    c = stream.channels
    if init_grid is not None:
        grid = init_grid.copy()
    else:
        grid = VoxelGrid.empty(config.resolution, c, config.bbox_min, config.bbox_max)
    if targets is not None and np.shape(targets) != stream.bits.shape:
        raise ValueError(f"targets shape {np.shape(targets)} != stream shape {stream.bits.shape}")
    if grid.channels != c:
        raise ValueError("initial grid channels differ from the stream")
    rng = np.random.default_rng(config.seed)
    history: list[LogRow] = []
    if config.n_iterations == 0:
        return grid, history

    supervision = _recon_targets(stream, trajectory, config, grid.bbox_min, grid.bbox_max, targets)
    n_targets = len(supervision.origins)
    if n_targets == 0:
        raise ValueError("no supervised rays: every target pixel is masked out or misses the grid")

    use_spike = config.lam > 0
    if use_spike:
        settle = config.settle_frames
        if settle < 0:
            settle = default_settle_frames(float(supervision.target.mean()), phi, stream.n_frames)
        window = min(config.spike_window_frames, stream.n_frames - settle)
        schedule = _SpikeSchedule(stream.n_frames, settle, window, config.spike_lattice_stride,
                                  stream.height, stream.width)
        gt_settled = settle_prefix(stream, settle)

    params = [grid.density_raw, grid.color_raw]
    opt = OptimizerState.like(params)
    grad = GridGrad(np.zeros_like(grid.density_raw), np.zeros_like(grid.color_raw))
    ns = config.n_samples
    t0 = time.perf_counter()
    for it in range(1, config.n_iterations + 1):
        grad.density.fill(0.0)
        grad.color.fill(0.0)

        idx = rng.integers(0, n_targets, size=min(config.rays_per_batch, n_targets))
        offs = rng.random((len(idx), ns))
        o, d = supervision.origins[idx], supervision.dirs[idx]
        tn, tf = supervision.t_near[idx], supervision.t_far[idx]
        pred, *_ = render_rays(grid, o, d, tn, tf, ns, offs)
        l_rec, adj = loss_recon(pred, supervision.target[idx], supervision.mask[idx], config.unmasked)
        backward_rays(grid, o, d, tn, tf, adj, grad, ns, offs)

        l_spk = None
        if use_spike:
            start, pix = schedule(it - 1)
            so, sd = [], []
            for f in range(start, start + window):
                po, pd = camera_rays(trajectory[f], pix)
                so.append(po); sd.append(pd)
            so, sd = np.concatenate(so), np.concatenate(sd)
            stn, stf = ray_box(so, sd, grid.bbox_min, grid.bbox_max)
            frames, *_ = render_rays(grid, so, sd, stn, stf, ns)
            frames = frames.reshape(window, len(pix), c)
            gt = gt_settled.bits[start - settle : start - settle + window, pix[:, 1], pix[:, 0]]
            l_spk, sadj = loss_spike(frames, gt, phi)
            if l_spk > 0:
                backward_rays(grid, so, sd, stn, stf, config.lam * sadj.reshape(-1, c), grad, ns)

        adam_step(params, [grad.density, grad.color], opt, config)

        row = LogRow(it, l_rec, l_spk, total_loss(l_rec, l_spk or 0.0, config.lam))
        if val is not None and (it % config.val_every == 0 or it == config.n_iterations):
            row.psnr_val = evaluate(grid, val, ns)
        history.append(row)
        if progress is not None:
            progress(row, time.perf_counter() - t0)
    return grid, history


def write_log(history: list[LogRow], path) -> None:
    def fmt(v):
        return "" if v is None else (str(v) if isinstance(v, int) else f"{v:.10g}")

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in history:
            w.writerow([fmt(r.iter), fmt(r.loss_recon), fmt(r.loss_spike), fmt(r.loss_total), fmt(r.psnr_val)])
