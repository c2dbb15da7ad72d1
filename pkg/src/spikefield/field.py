"""Dense voxel radiance field with emission-absorption volume rendering.

Raw parameters live on voxel centers ``bbox_min + (i + 0.5) * h``. A query
interpolates raw values trilinearly and then applies the activations
(softplus for density, sigmoid for color). The view direction is ignored.

Along a ray, ``[t_near, t_far]`` is split into ``n`` equal bins with one
sample per bin (midpoint, or uniform within the bin when jittered)::

    delta_i = t_{i+1} - t_i          (last: t_far - t_n)
    alpha_i = 1 - exp(-sigma_i delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    color   = sum_i T_i alpha_i c_i
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import BadMagicError, BadVersionError, CameraPose, FormatError, TruncatedError

DEFAULT_SAMPLES = 128
INIT_DENSITY_RAW = -2.0
INIT_COLOR_RAW = 0.0

VXGR_MAGIC = b"VXGR"
VXGR_VERSION = 1
# magic, version, channels, reserved, resolution, bbox_min xyz, bbox_max xyz
_VXGR_HEADER = struct.Struct("<4sHBBI6d")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class VoxelGrid:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density_raw: np.ndarray  # (R, R, R)
    color_raw: np.ndarray  # (R, R, R, C)

    def __post_init__(self) -> None:
        self.bbox_min = np.array(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.array(self.bbox_max, dtype=np.float64).reshape(3)
        if not (self.bbox_min < self.bbox_max).all():
            raise ValueError("bbox_min must be < bbox_max componentwise")
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float64)
        r = self.density_raw.shape[0]
        if self.density_raw.shape != (r, r, r) or r < 2:
            raise ValueError(f"density grid must be (R, R, R) with R >= 2, got {self.density_raw.shape}")
        if self.color_raw.ndim != 4 or self.color_raw.shape[:3] != (r, r, r):
            raise ValueError(f"color grid must be (R, R, R, C), got {self.color_raw.shape}")

    @classmethod
    def empty(cls, resolution: int, channels: int = 3, bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1),
              density_raw: float = INIT_DENSITY_RAW, color_raw: float = INIT_COLOR_RAW) -> "VoxelGrid":
        r = int(resolution)
        return cls(
            np.asarray(bbox_min, dtype=np.float64),
            np.asarray(bbox_max, dtype=np.float64),
            np.full((r, r, r), float(density_raw)),
            np.full((r, r, r, channels), float(color_raw)),
        )

    @property
    def resolution(self) -> int:
        return self.density_raw.shape[0]

    @property
    def channels(self) -> int:
        return self.color_raw.shape[3]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / self.resolution

    def voxel_centers(self) -> np.ndarray:
        """(R, R, R, 3) world coordinates of voxel centers."""
        axes = [self.bbox_min[a] + (np.arange(self.resolution) + 0.5) * self.voxel_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.bbox_min.copy(), self.bbox_max.copy(),
                         self.density_raw.copy(), self.color_raw.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in [
                (self.bbox_min, other.bbox_min), (self.bbox_max, other.bbox_max),
                (self.density_raw, other.density_raw), (self.color_raw, other.color_raw),
            ]
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.t_near < 0:
            raise ValueError("t_near must be >= 0")
        if not self.t_near < self.t_far:
            raise ValueError(f"degenerate ray: t_near={self.t_near} >= t_far={self.t_far}")


class RenderResult(NamedTuple):
    color: np.ndarray
    weights: np.ndarray
    transmittance_final: float
    sample_ts: np.ndarray


class GridGrad(NamedTuple):
    density: np.ndarray
    color: np.ndarray


def field_query(grid: VoxelGrid, point) -> tuple[float, np.ndarray]:
    """(sigma, color) at a world point; zero outside the bounding box."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if (p < grid.bbox_min).any() or (p > grid.bbox_max).any():
        return 0.0, np.zeros(grid.channels)
    r = grid.resolution
    u = np.clip((p[0] - grid.bbox_min) / grid.voxel_size - 0.5, 0.0, r - 1)
    i0 = np.minimum(np.floor(u).astype(int), r - 2)
    f = u - i0
    raw_s = 0.0
    raw_c = np.zeros(grid.channels)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                ix, iy, iz = i0[0] + dx, i0[1] + dy, i0[2] + dz
                raw_s += w * grid.density_raw[ix, iy, iz]
                raw_c += w * grid.color_raw[ix, iy, iz]
    return float(softplus(raw_s)), sigmoid(raw_c)


def _ray_arrays(rays):
    o = np.ascontiguousarray([r.origin for r in rays], dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray([r.direction for r in rays], dtype=np.float64).reshape(-1, 3)
    tn = np.ascontiguousarray([r.t_near for r in rays], dtype=np.float64)
    tf = np.ascontiguousarray([r.t_far for r in rays], dtype=np.float64)
    return o, d, tn, tf


def jitter_offsets(n_rays: int, n_samples: int, seed) -> np.ndarray | None:
    """Per-bin sample positions in [0, 1); ``None`` means bin midpoints."""
    if seed is None:
        return None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.random((n_rays, n_samples))


def render_rays(grid: VoxelGrid, origins, dirs, t_near, t_far, n_samples: int = DEFAULT_SAMPLES,
                offsets=None, want_weights: bool = False):
    """Batched forward render. Returns (color (M, C), T_final (M,), weights, ts)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return kernels.backend.render_forward(
        grid.density_raw, grid.color_raw, grid.bbox_min, grid.bbox_max,
        np.ascontiguousarray(origins, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t_near, dtype=np.float64), np.ascontiguousarray(t_far, dtype=np.float64),
        None if offsets is None else np.ascontiguousarray(offsets, dtype=np.float64),
        int(n_samples), bool(want_weights), kernels.threads(),
    )


def backward_rays(grid: VoxelGrid, origins, dirs, t_near, t_far, d_color,
                  grad: GridGrad, n_samples: int = DEFAULT_SAMPLES, offsets=None) -> GridGrad:
    """Accumulate d(loss)/d(raw params) for a ray batch into ``grad`` (in place)."""
    d_color = np.ascontiguousarray(d_color, dtype=np.float64).reshape(len(origins), grid.channels)
    kernels.backend.render_backward(
        grid.density_raw, grid.color_raw, grid.bbox_min, grid.bbox_max,
        np.ascontiguousarray(origins, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t_near, dtype=np.float64), np.ascontiguousarray(t_far, dtype=np.float64),
        None if offsets is None else np.ascontiguousarray(offsets, dtype=np.float64),
        int(n_samples), d_color, grad.density, grad.color,
    )
    return grad


def zero_grad(grid: VoxelGrid) -> GridGrad:
    return GridGrad(np.zeros_like(grid.density_raw), np.zeros_like(grid.color_raw))


def render_ray(grid: VoxelGrid, ray: Ray, n_samples: int = DEFAULT_SAMPLES, jitter=None) -> RenderResult:
    o, d, tn, tf = _ray_arrays([ray])
    offs = jitter_offsets(1, n_samples, jitter)
    color, t_final, w, ts = render_rays(grid, o, d, tn, tf, n_samples, offs, want_weights=True)
    return RenderResult(color[0], w[0], float(t_final[0]), ts[0])


def render_ray_backward(grid: VoxelGrid, ray: Ray, result: RenderResult, d_color,
                        n_samples: int | None = None, jitter=None) -> GridGrad:
    """Exact gradient of ``d_color . color`` w.r.t. the raw grid parameters.

    ``result`` must come from ``render_ray`` with the same grid, ray, sample
    count and jitter; the sample positions are recomputed and checked.
    """
    n = len(result.sample_ts) if n_samples is None else n_samples
    if n != len(result.sample_ts):
        raise ValueError("sample count does not match the render result")
    o, d, tn, tf = _ray_arrays([ray])
    offs = jitter_offsets(1, n, jitter)
    if offs is None:
        expect = tn[0] + (np.arange(n) + 0.5) * ((tf[0] - tn[0]) / n)
    else:
        expect = tn[0] + (np.arange(n) + offs[0]) * ((tf[0] - tn[0]) / n)
    if not np.allclose(expect, result.sample_ts, rtol=0, atol=1e-12):
        raise ValueError("render result does not match this ray/jitter")
    d_color = np.asarray(d_color, dtype=np.float64).reshape(1, grid.channels)
    return backward_rays(grid, o, d, tn, tf, d_color, zero_grad(grid), n, offs)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def ray_box(origins: np.ndarray, dirs: np.ndarray, bmin: np.ndarray, bmax: np.ndarray):
    """Slab intersection; returns (t_near, t_far) with misses as t_near >= t_far."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bmin - origins) * inv
        t1 = (bmax - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    miss = ~(t_far > t_near)
    t_far = np.where(miss, t_near, t_far)
    return t_near, t_far


def camera_rays(pose: CameraPose, pixels: np.ndarray | None = None):
    """World-space rays through pixel centers.

    ``pixels`` is an (M, 2) array of (x, y) integer pixel coordinates; all
    pixels in row-major order when omitted. Returns (origins, dirs).
    """
    if pixels is None:
        ys, xs = np.mgrid[0 : pose.height, 0 : pose.width]
        xs, ys = xs.reshape(-1), ys.reshape(-1)
    else:
        pixels = np.asarray(pixels)
        xs, ys = pixels[:, 0], pixels[:, 1]
    cam = np.stack(
        [
            (xs + 0.5 - pose.width / 2.0) / pose.focal_px,
            -(ys + 0.5 - pose.height / 2.0) / pose.focal_px,
            -np.ones(xs.shape),
        ],
        axis=-1,
    )
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, np.ascontiguousarray(dirs)


def render_pixels(grid: VoxelGrid, pose: CameraPose, pixels=None, n_samples: int = DEFAULT_SAMPLES,
                  jitter=None) -> np.ndarray:
    o, d = camera_rays(pose, pixels)
    tn, tf = ray_box(o, d, grid.bbox_min, grid.bbox_max)
    offs = jitter_offsets(len(o), n_samples, jitter)
    color, *_ = render_rays(grid, o, d, tn, tf, n_samples, offs)
    return color


def render_image(grid: VoxelGrid, pose: CameraPose, n_samples: int = DEFAULT_SAMPLES,
                 jitter=None) -> np.ndarray:
    """Render an (H, W, C) intensity frame; rays are clipped to the grid bbox."""
    color = render_pixels(grid, pose, None, n_samples, jitter)
    return color.reshape(pose.height, pose.width, grid.channels)


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------


def write_grid(grid: VoxelGrid, sink) -> int:
    header = _VXGR_HEADER.pack(
        VXGR_MAGIC, VXGR_VERSION, grid.channels, 0, grid.resolution,
        *grid.bbox_min.tolist(), *grid.bbox_max.tolist(),
    )
    dens = grid.density_raw.astype("<f4").tobytes()
    col = grid.color_raw.astype("<f4").tobytes()
    sink.write(header)
    sink.write(dens)
    sink.write(col)
    return len(header) + len(dens) + len(col)


def read_grid(source) -> VoxelGrid:
    header = source.read(_VXGR_HEADER.size)
    if header[:4] != VXGR_MAGIC:
        raise BadMagicError("not a voxel grid checkpoint (bad magic)")
    if len(header) < _VXGR_HEADER.size:
        raise TruncatedError("truncated checkpoint header")
    _, version, channels, _, r, *bbox = _VXGR_HEADER.unpack(header)
    if version != VXGR_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    n = r * r * r
    dens = source.read(4 * n)
    col = source.read(4 * n * channels)
    if len(dens) != 4 * n or len(col) != 4 * n * channels:
        raise TruncatedError("truncated checkpoint payload")
    try:
        return VoxelGrid(
            np.array(bbox[:3]), np.array(bbox[3:]),
            np.frombuffer(dens, dtype="<f4").reshape(r, r, r).astype(np.float64),
            np.frombuffer(col, dtype="<f4").reshape(r, r, r, channels).astype(np.float64),
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_grid(grid: VoxelGrid, path) -> int:
    with open(path, "wb") as fh:
        return write_grid(grid, fh)


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        return read_grid(fh)
