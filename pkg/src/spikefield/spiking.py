"""Spike-stream synthesis from a radiance field along a camera trajectory.

Frames are rendered at every pose and fed through the same accumulator as
the camera simulator, so a generated stream is by construction identical to
``encode_sequence(render_sequence(...))``. Nothing here is differentiated.
"""
from __future__ import annotations

import math

import numpy as np

from .core import SpikeStream, Trajectory
from .field import DEFAULT_SAMPLES, VoxelGrid, render_image
from .sim import StartupMode, encode_frames, init_accumulator


def render_sequence(grid: VoxelGrid, trajectory: Trajectory,
                    n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Render one intensity frame per pose; returns (N, H, W, C)."""
    if not len(trajectory):
        raise ValueError("empty trajectory")
    return np.stack([render_image(grid, pose, n_samples) for pose in trajectory])


def _period(trajectory: Trajectory) -> int:
    if len(trajectory) < 2:
        return 1
    steps = {b.timestamp_us - a.timestamp_us for a, b in zip(trajectory, trajectory[1:])}
    if len(steps) != 1:
        raise ValueError("trajectory timestamps are not evenly spaced")
    return steps.pop()


def generate_spikes(grid: VoxelGrid, trajectory: Trajectory, phi: float,
                    mode: StartupMode = StartupMode.random(0),
                    n_samples: int = DEFAULT_SAMPLES) -> SpikeStream:
    """Spike stream seen by a camera following ``trajectory`` through ``grid``.

    Frames are encoded as soon as they are rendered, so memory stays at one
    frame plus the packed output.
    """
    if not len(trajectory):
        raise ValueError("empty trajectory")
    period = _period(trajectory)
    first = trajectory[0]
    state = init_accumulator(first.width, first.height, grid.channels, phi, mode)
    bits = np.empty((len(trajectory), first.height, first.width, grid.channels), dtype=np.uint8)
    for i, pose in enumerate(trajectory):
        frame = render_image(grid, pose, n_samples)
        bits[i] = encode_frames(frame[None], phi, state)[0]
    return SpikeStream(bits, period, phi, first.timestamp_us)


def settle_prefix(stream: SpikeStream, k: int) -> SpikeStream:
    """Drop the first ``k`` frames (startup transient), shifting the start time."""
    if not 0 <= k < stream.n_frames:
        raise ValueError(f"settle length {k} out of range for {stream.n_frames} frames")
    return SpikeStream(
        stream.bits[k:], stream.readout_period_us, stream.threshold,
        stream.start_time_us + k * stream.readout_period_us,
    )


def default_settle_frames(mean_intensity: float, phi: float, n_frames: int) -> int:
    """ceil(2 phi / mean intensity), capped to leave at least one frame."""
    if mean_intensity <= 0:
        return 0
    return int(min(n_frames - 1, math.ceil(2.0 * phi / mean_intensity)))
