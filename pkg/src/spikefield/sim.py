"""Integrate-and-fire spike camera simulator.

Each pixel accumulates per-readout intensity ``I`` into a residual ``A`` and
fires when ``A >= phi``, subtracting ``phi`` (reset by subtraction). Inputs
are taken as already integrated over one readout interval.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import SpikeStream, check_intensity_frame

log = logging.getLogger(__name__)

# Relative slack on the fire comparison. Accumulating decimal-looking inputs
# (0.3 seven times onto 0.9) lands one ulp short of phi; such ties fire.
FIRE_RTOL = 1e-12
# A + I is capped just under 2*phi so at most one spike fires per readout.
CLAMP_RTOL = 1e-9


@dataclass(frozen=True)
class StartupMode:
    """Initial accumulator residuals: all zero, or i.i.d. uniform on [0, phi)."""

    seed: int | None = None

    @classmethod
    def zero(cls) -> "StartupMode":
        return cls(None)

    @classmethod
    def random(cls, seed: int) -> "StartupMode":
        return cls(int(seed))

    @property
    def is_random(self) -> bool:
        return self.seed is not None

    @classmethod
    def parse(cls, text: str) -> "StartupMode":
        """Parse ``zero`` or ``random:<seed>``."""
        if text == "zero":
            return cls.zero()
        if text.startswith("random:"):
            return cls.random(int(text.split(":", 1)[1]))
        raise ValueError(f"startup must be 'zero' or 'random:<seed>', got {text!r}")

    def __str__(self) -> str:
        return "zero" if self.seed is None else f"random:{self.seed}"


@dataclass
class AccumulatorState:
    residual: np.ndarray  # (H, W, C) float64
    phi: float
    clamp_events: int = 0

    def copy(self) -> "AccumulatorState":
        return AccumulatorState(self.residual.copy(), self.phi, self.clamp_events)


def _levels(phi: float) -> tuple[float, float]:
    fire_level = phi - phi * FIRE_RTOL
    clamp_level = 2.0 * phi * (1.0 - CLAMP_RTOL)
    return fire_level, clamp_level


def init_accumulator(width: int, height: int, channels: int, phi: float,
                     mode: StartupMode = StartupMode()) -> AccumulatorState:
    if not phi > 0:
        raise ValueError(f"threshold must be positive, got {phi}")
    shape = (height, width, channels)
    if mode.is_random:
        rng = np.random.default_rng(mode.seed)
        residual = rng.uniform(0.0, phi, size=shape)
        # uniform() may round up to phi for tiny phi
        residual[residual >= phi] = 0.0
    else:
        residual = np.zeros(shape)
    return AccumulatorState(residual, float(phi))


def step_encode(state: AccumulatorState, frame: np.ndarray,
                phi: float | None = None) -> tuple[np.ndarray, AccumulatorState]:
    """Encode one readout. Returns (spike frame, new state); ``state`` is untouched."""
    frame = check_intensity_frame(frame)
    phi = state.phi if phi is None else float(phi)
    if frame.shape != state.residual.shape:
        raise ValueError(f"frame shape {frame.shape} != accumulator shape {state.residual.shape}")
    new = state.copy()
    bits, clamped = _encode_block(frame[None], new.residual, phi)
    new.clamp_events += clamped
    return bits[0], new


def _encode_block(frames: np.ndarray, residual: np.ndarray, phi: float) -> tuple[np.ndarray, int]:
    """Run the kernel over (N, H, W, C) frames, updating ``residual`` in place."""
    n = frames.shape[0]
    shape = residual.shape
    flat_frames = np.ascontiguousarray(frames.reshape(n, -1), dtype=np.float64)
    flat_state = np.ascontiguousarray(residual.reshape(-1), dtype=np.float64)
    fire_level, clamp_level = _levels(phi)
    bits, clamped = kernels.backend.encode_frames(flat_frames, flat_state, fire_level, phi, clamp_level)
    residual[...] = flat_state.reshape(shape)
    return np.asarray(bits).reshape((n,) + shape), int(clamped)


def encode_frames(frames: np.ndarray, phi: float, state: AccumulatorState) -> np.ndarray:
    """Encode a (N, H, W, C) intensity block, mutating ``state``; returns bits."""
    if frames.shape[1:] != state.residual.shape:
        raise ValueError(f"frame shape {frames.shape[1:]} != accumulator shape {state.residual.shape}")
    bits, clamped = _encode_block(frames, state.residual, phi)
    state.clamp_events += clamped
    return bits


def encode_sequence(frames: Sequence[np.ndarray] | np.ndarray, phi: float,
                    mode: StartupMode = StartupMode(), readout_period_us: int = 25,
                    start_time_us: int = 0,
                    return_state: bool = False):
    """Fold ``step_encode`` over ``frames`` and wrap the bits as a SpikeStream."""
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        block = np.asarray(frames, dtype=np.float64)
        if not np.isfinite(block).all() or (block < 0).any():
            raise ValueError("intensity frames must be finite and nonnegative")
    else:
        if len(frames) == 0:
            raise ValueError("encode_sequence needs at least one frame")
        shape = np.shape(frames[0])
        for f in frames:
            if np.shape(f) != shape:
                raise ValueError(f"frame shape {np.shape(f)} differs from {shape}")
        block = np.stack([check_intensity_frame(f) for f in frames])
    if block.shape[0] == 0:
        raise ValueError("encode_sequence needs at least one frame")
    _, h, w, c = block.shape
    state = init_accumulator(w, h, c, phi, mode)
    bits = encode_frames(block, phi, state)
    if state.clamp_events:
        log.warning("clamped %d readouts whose charge would exceed 2*phi", state.clamp_events)
    stream = SpikeStream(bits, readout_period_us, phi, start_time_us)
    if return_state:
        return stream, state
    return stream


def count_oracle(i_const: float, n_steps: int, a0: float, phi: float) -> int:
    """Closed-form spike count for constant input: floor((A0 + n*I) / phi)."""
    if not (0 <= a0 < phi) or i_const < 0:
        raise ValueError("count_oracle needs 0 <= a0 < phi and i_const >= 0")
    return math.floor((a0 + n_steps * i_const) / phi + FIRE_RTOL)
