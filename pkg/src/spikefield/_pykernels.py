"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``SPIKEFIELD_PURE=1``. Signatures and semantics match the extension; the
encoder is bit-identical, the renderer agrees to rounding.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def encode_frames(frames, state, fire_level, phi, clamp_level):
    """Integrate-and-fire over time.

    frames: (N, P) float64, state: (P,) float64 residuals (updated in place).
    Returns (bits (N, P) uint8, n_clamped).
    """
    n, p = frames.shape
    bits = np.zeros((n, p), dtype=np.uint8)
    a = state
    clamped = 0
    for k in range(n):
        a += frames[k]
        over = a > clamp_level
        if over.any():
            clamped += int(over.sum())
            a[over] = clamp_level
        fire = a >= fire_level
        bits[k] = fire
        a[fire] -= phi
        np.maximum(a, 0.0, out=a)
    return bits, clamped


def _trilinear_setup(pts, bmin, bmax, res):
    h = (bmax - bmin) / res
    inside = np.all((pts >= bmin) & (pts <= bmax), axis=-1)
    u = (pts - bmin) / h - 0.5
    np.clip(u, 0.0, res - 1, out=u)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    f = u - i0
    return inside, i0, f


def _corners(i0, f, res):
    """Yield (flat voxel index, weight) for the 8 trilinear corners."""
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx = ((ix + dx) * res + (iy + dy)) * res + (iz + dz)
                yield idx, wx * wy * wz


def _samples(origins, dirs, tnear, tfar, offsets, n_samples):
    m = origins.shape[0]
    valid = tfar > tnear
    dt = np.where(valid, (tfar - tnear) / n_samples, 0.0)
    k = np.arange(n_samples, dtype=np.float64)[None, :]
    u = 0.5 if offsets is None else offsets
    ts = tnear[:, None] + (k + u) * dt[:, None]
    deltas = np.empty((m, n_samples))
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = tfar - ts[:, -1]
    deltas[~valid] = 0.0
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    return valid, ts, deltas, pts


def _query(density, color, bmin, bmax, pts):
    res = density.shape[0]
    c = color.shape[-1]
    inside, i0, f = _trilinear_setup(pts, bmin, bmax, res)
    dflat = density.reshape(-1)
    cflat = color.reshape(-1, c)
    raw_s = np.zeros(pts.shape[:-1])
    raw_c = np.zeros(pts.shape[:-1] + (c,))
    corners = list(_corners(i0, f, res))
    for idx, w in corners:
        raw_s += w * dflat[idx]
        raw_c += w[..., None] * cflat[idx]
    return inside, raw_s, raw_c, corners


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward_arrays(density, color, bmin, bmax, origins, dirs, tnear, tfar, offsets, n_samples):
    valid, ts, deltas, pts = _samples(origins, dirs, tnear, tfar, offsets, n_samples)
    inside, raw_s, raw_c, corners = _query(density, color, bmin, bmax, pts)
    mask = inside & valid[:, None]
    sigma = np.where(mask, _softplus(raw_s), 0.0)
    col = np.where(mask[..., None], _sigmoid(raw_c), 0.0)
    e = np.exp(-sigma * deltas)
    alpha = 1.0 - e
    trans = np.cumprod(np.concatenate([np.ones((len(e), 1)), e], axis=1), axis=1)
    weights = trans[:, :-1] * alpha
    rgb = np.einsum("mn,mnc->mc", weights, col)
    return dict(
        valid=valid, ts=ts, deltas=deltas, mask=mask, raw_s=raw_s, raw_c=raw_c,
        sigma=sigma, col=col, e=e, trans=trans, weights=weights, rgb=rgb, corners=corners,
    )


def render_forward(density, color, bmin, bmax, origins, dirs, tnear, tfar, offsets,
                   n_samples, want_weights=False, n_threads=1):
    f = _forward_arrays(density, color, bmin, bmax, origins, dirs, tnear, tfar, offsets, n_samples)
    t_final = f["trans"][:, -1].copy()
    if want_weights:
        ts = np.where(f["valid"][:, None], f["ts"], 0.0)
        return f["rgb"], t_final, f["weights"], ts
    return f["rgb"], t_final, None, None


def render_backward(density, color, bmin, bmax, origins, dirs, tnear, tfar, offsets,
                    n_samples, d_rgb, grad_density, grad_color):
    """Accumulate dL/d(raw params) into grad_density / grad_color in place."""
    f = _forward_arrays(density, color, bmin, bmax, origins, dirs, tnear, tfar, offsets, n_samples)
    w, col, deltas = f["weights"], f["col"], f["deltas"]
    gc = np.einsum("mnc,mc->mn", col, d_rgb)
    contrib = w * gc
    # suffix[k] = sum_{j>k} w_j (g . c_j)
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    t_after = f["trans"][:, 1:]
    d_sigma = deltas * (t_after * gc - suffix)
    d_col = w[..., None] * d_rgb[:, None, :]
    mask = f["mask"]
    d_raw_s = np.where(mask, d_sigma * _sigmoid(f["raw_s"]), 0.0)
    d_raw_c = np.where(mask[..., None], d_col * col * (1.0 - col), 0.0)
    nvox = grad_density.size
    c = grad_color.shape[-1]
    gd = grad_density.reshape(-1)
    gcol = grad_color.reshape(-1, c)
    for idx, wt in f["corners"]:
        flat = idx.reshape(-1)
        gd += np.bincount(flat, weights=(wt * d_raw_s).reshape(-1), minlength=nvox)
        wc = (wt[..., None] * d_raw_c).reshape(-1, c)
        for ch in range(c):
            gcol[:, ch] += np.bincount(flat, weights=wc[:, ch], minlength=nvox)
