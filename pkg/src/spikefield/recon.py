"""Classic spike-stream image reconstruction and spike masks.

``tfp`` estimates intensity from the firing rate in a temporal window,
``tfi`` from the inter-spike interval around a frame. Masks are the logical
OR of the spike frames in a window around the target frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SpikeStream


@dataclass(frozen=True)
class ReconConfig:
    method: str = "tfp"
    window_w: int = 31
    max_isi: int = 32

    def __post_init__(self) -> None:
        if self.method not in ("tfp", "tfi"):
            raise ValueError(f"unknown reconstruction method {self.method!r}")
        if self.window_w < 1 or self.window_w % 2 == 0:
            raise ValueError("window_w must be a positive odd frame count")
        if self.max_isi < 1:
            raise ValueError("max_isi must be >= 1")


def _check_center(stream: SpikeStream, center_i: int) -> None:
    if not 0 <= center_i < stream.n_frames:
        raise IndexError(f"frame {center_i} outside stream of {stream.n_frames} frames")


def _window(stream: SpikeStream, center_i: int, half: int) -> tuple[int, int]:
    _check_center(stream, center_i)
    return max(0, center_i - half), min(stream.n_frames, center_i + half + 1)


def tfp_reconstruct(stream: SpikeStream, center_i: int, window_w: int = 31) -> np.ndarray:
    """Rate estimate: spike count * phi / effective window length."""
    if window_w < 1 or window_w % 2 == 0:
        raise ValueError("window_w must be a positive odd frame count")
    lo, hi = _window(stream, center_i, (window_w - 1) // 2)
    counts = stream.bits[lo:hi].sum(axis=0, dtype=np.int64)
    return counts * (stream.threshold / (hi - lo))


def tfi_reconstruct(stream: SpikeStream, center_i: int, max_isi: int = 32) -> np.ndarray:
    """Interval estimate: phi / ISI of the spikes bracketing ``center_i``.

    The bracket is the last spike at or before the center and the first
    spike after it, each searched at most ``max_isi`` frames away. Pixels
    without both ends of a bracket reconstruct to 0.
    """
    if max_isi < 1:
        raise ValueError("max_isi must be >= 1")
    _check_center(stream, center_i)
    bits = stream.bits
    lo = max(0, center_i - max_isi)
    past = bits[lo : center_i + 1][::-1]  # past[k] is frame center_i - k
    has_prev = past.any(axis=0)
    back = np.argmax(past, axis=0)
    hi = min(stream.n_frames, center_i + 1 + max_isi)
    future = bits[center_i + 1 : hi]
    if future.shape[0]:
        has_next = future.any(axis=0)
        ahead = np.argmax(future, axis=0) + 1
    else:
        has_next = np.zeros(bits.shape[1:], dtype=bool)
        ahead = np.ones(bits.shape[1:], dtype=np.int64)
    isi = back + ahead
    ok = has_prev & has_next
    out = np.zeros(bits.shape[1:])
    out[ok] = stream.threshold / isi[ok]
    return out


def reconstruct(stream: SpikeStream, center_i: int, config: ReconConfig = ReconConfig()) -> np.ndarray:
    if config.method == "tfp":
        return tfp_reconstruct(stream, center_i, config.window_w)
    return tfi_reconstruct(stream, center_i, config.max_isi)


def build_mask(stream: SpikeStream, center_i: int, n: int = 2) -> np.ndarray:
    """OR of spike frames center_i - n .. center_i + n (clamped to the stream)."""
    if n < 0:
        raise ValueError("mask half-window must be >= 0")
    lo, hi = _window(stream, center_i, n)
    return np.bitwise_or.reduce(stream.bits[lo:hi], axis=0).astype(np.uint8)


def apply_mask(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    mask = np.asarray(mask)
    if frame.shape != mask.shape:
        raise ValueError(f"frame shape {frame.shape} != mask shape {mask.shape}")
    return frame * mask
