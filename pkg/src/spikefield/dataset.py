"""Procedural scenes, orbit trajectories and simulated spike datasets."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfg
from .core import (
    CameraPose, SpikeStream, Trajectory, image_suffix, save_stream, save_trajectory, write_image,
)
from .field import VoxelGrid, inverse_softplus, logit, render_image, save_grid
from .sim import StartupMode, encode_sequence
from .spiking import render_sequence

log = logging.getLogger(__name__)

EMPTY_DENSITY_RAW = -10.0  # softplus(-10) ~ 4.5e-5
COLOR_EPS = 1e-6


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, ...]
    density: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    min: tuple[float, float, float]
    max: tuple[float, float, float]
    color: tuple[float, ...]
    density: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        center, half = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(pts - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        return np.asarray(self.min), np.asarray(self.max)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    grid_resolution: int = 64
    channels: int = 3

    def __post_init__(self) -> None:
        lo, hi = np.asarray(self.bbox_min, float), np.asarray(self.bbox_max, float)
        if not (lo < hi).all():
            raise ValueError("bbox_min must be < bbox_max")
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be >= 2")
        for p in self.primitives:
            plo, phi_ = p.bounds()
            if (plo < lo).any() or (phi_ > hi).any():
                raise ValueError(f"primitive {p} extends outside the bbox")
            if p.density < 0:
                raise ValueError("primitive density must be >= 0")
            if len(p.color) != self.channels:
                raise ValueError(f"primitive color needs {self.channels} channels")
            if min(p.color) < 0 or max(p.color) > 1:
                raise ValueError("primitive color must lie in [0, 1]")


@dataclass(frozen=True)
class OrbitParams:
    n_views: int = 200
    radius: float = 4.0
    elevation_deg: float = 25.0
    duration_s: float = 0.025
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal_px: float = 120.0
    width: int = 64
    height: int = 64


def desk_scene(channels: int = 3, resolution: int = 64) -> SceneSpec:
    """Two spheres and a box: the default end-to-end test scene."""

    def col(rgb):
        return tuple(rgb) if channels == 3 else (float(np.mean(rgb)),)

    prims = (
        Sphere((0.35, 0.2, 0.05), 0.3, col((0.9, 0.45, 0.3)), 60.0),
        Sphere((-0.3, -0.3, 0.15), 0.25, col((0.35, 0.55, 0.9)), 60.0),
        Box((-0.3, 0.15, -0.5), (0.2, 0.6, -0.1), col((0.55, 0.85, 0.4)), 60.0),
    )
    return SceneSpec(prims, grid_resolution=resolution, channels=channels)


def make_scene(spec: SceneSpec) -> VoxelGrid:
    """Voxelize primitives; inside voxels reproduce the primitive's (sigma, c).

    Where primitives overlap the deepest one (most negative signed distance)
    wins. Empty voxels are near-transparent and carry the color of the
    nearest primitive so trilinear blending at surfaces keeps the right hue.
    """
    r = spec.grid_resolution
    grid = VoxelGrid.empty(r, spec.channels, spec.bbox_min, spec.bbox_max,
                           density_raw=EMPTY_DENSITY_RAW, color_raw=0.0)
    if not spec.primitives:
        return grid
    centers = grid.voxel_centers()
    sdf = np.stack([p.sdf(centers) for p in spec.primitives])
    owner = np.argmin(sdf, axis=0)
    inside = np.take_along_axis(sdf, owner[None], 0)[0] <= 0.0
    dens = np.array([p.density for p in spec.primitives])
    cols = np.clip(np.array([p.color for p in spec.primitives], dtype=float), COLOR_EPS, 1 - COLOR_EPS)
    grid.density_raw[inside] = inverse_softplus(dens[owner[inside]])
    grid.color_raw[...] = logit(cols)[owner]
    return grid


def _look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    fwd = target - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("camera forward axis is parallel to up")
    right /= n
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, position
    return m


def orbit_pose(azimuth: float, params: OrbitParams, timestamp_us: int) -> CameraPose:
    e = math.radians(params.elevation_deg)
    target = np.asarray(params.look_at, dtype=float)
    pos = target + params.radius * np.array(
        [math.cos(e) * math.cos(azimuth), math.cos(e) * math.sin(azimuth), math.sin(e)]
    )
    return CameraPose(_look_at(pos, target), params.focal_px, params.width, params.height, timestamp_us)


def period_us(params: OrbitParams) -> int:
    exact = params.duration_s * 1e6 / params.n_views
    period = int(round(exact))
    if period < 1:
        raise ValueError("readout period below one microsecond")
    if abs(period - exact) > 1e-6 * max(1.0, exact):
        log.warning("readout period %.6g us rounded to %d us", exact, period)
    return period


def make_trajectory(params: OrbitParams = OrbitParams()) -> Trajectory:
    """Full 360 degree ring, equally spaced in azimuth, one pose per readout."""
    if params.n_views < 1 or params.radius <= 0:
        raise ValueError("need n_views >= 1 and radius > 0")
    period = period_us(params)
    step = 2.0 * math.pi / params.n_views
    return Trajectory(tuple(orbit_pose(i * step, params, i * period) for i in range(params.n_views)))


def heldout_trajectory(params: OrbitParams, n_views: int = 8) -> Trajectory:
    """Poses halfway between training views, spread evenly around the ring."""
    period = period_us(params)
    step = 2.0 * math.pi / params.n_views
    idx = [(j * params.n_views) // n_views for j in range(n_views)]
    return Trajectory(
        tuple(orbit_pose((i + 0.5) * step, params, i * period + period // 2) for i in idx)
    )


@dataclass
class Dataset:
    gt_grid: VoxelGrid
    frames: np.ndarray
    stream: SpikeStream
    trajectory: Trajectory
    heldout: Trajectory | None = None
    heldout_images: np.ndarray | None = None
    spec: SceneSpec | None = None
    params: OrbitParams | None = None


def build_dataset(spec: SceneSpec, params: OrbitParams, phi: float,
                  mode: StartupMode = StartupMode.random(0), n_samples: int = 128,
                  n_heldout: int = 8, out_dir=None) -> Dataset:
    """Ground-truth grid, rendered frames, simulated spikes; optionally saved."""
    grid = make_scene(spec)
    traj = make_trajectory(params)
    frames = render_sequence(grid, traj, n_samples)
    stream = encode_sequence(frames, phi, mode, readout_period_us=period_us(params),
                             start_time_us=traj[0].timestamp_us)
    held = heldout_trajectory(params, n_heldout) if n_heldout else None
    held_imgs = np.stack([render_image(grid, p, n_samples) for p in held]) if held else None
    ds = Dataset(grid, frames, stream, traj, held, held_imgs, spec, params)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_grid(ds.gt_grid, out / "gt.vxgr")
    save_stream(ds.stream, out / "stream.spk")
    save_trajectory(ds.trajectory, out / "traj.txt")
    suffix = image_suffix(ds.gt_grid.channels)
    i_max = max(1.0, float(ds.frames.max(initial=0.0)))
    for i, f in enumerate(ds.frames):
        write_image(out / "frames" / f"{i:05d}{suffix}", f, i_max)
    if ds.heldout is not None:
        (out / "heldout").mkdir(exist_ok=True)
        save_trajectory(ds.heldout, out / "heldout_traj.txt")
        for i, f in enumerate(ds.heldout_images):
            write_image(out / "heldout" / f"{i:03d}{suffix}", f, 1.0)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


def parse_scene(text: str) -> tuple[SceneSpec, OrbitParams]:
    top, sections = cfg.parse_keyvalue(text)
    channels = int(top.get("channels", 3))

    def color(v):
        c = tuple(cfg.floats(v))
        if len(c) != channels:
            raise cfg.ConfigError(f"color {v!r} needs {channels} values")
        return c

    prims = []
    for name, keys in sections:
        try:
            if name == "sphere":
                prims.append(Sphere(cfg.vec3(keys["center"]), float(keys["radius"]),
                                    color(keys["color"]), float(keys["density"])))
            elif name == "box":
                prims.append(Box(cfg.vec3(keys["min"]), cfg.vec3(keys["max"]),
                                 color(keys["color"]), float(keys["density"])))
            else:
                raise cfg.ConfigError(f"unknown section [{name}]")
        except KeyError as exc:
            raise cfg.ConfigError(f"[{name}] is missing key {exc.args[0]!r}") from None
    known = {
        "bbox_min", "bbox_max", "resolution", "channels", "orbit_radius", "elevation_deg",
        "focal_px", "width", "height", "look_at",
    }
    unknown = set(top) - known
    if unknown:
        raise cfg.ConfigError(f"unknown scene keys: {sorted(unknown)}")
    spec = SceneSpec(
        tuple(prims),
        cfg.vec3(top.get("bbox_min", "-1 -1 -1")),
        cfg.vec3(top.get("bbox_max", "1 1 1")),
        int(top.get("resolution", 64)),
        channels,
    )
    d = OrbitParams()
    params = OrbitParams(
        radius=float(top.get("orbit_radius", d.radius)),
        elevation_deg=float(top.get("elevation_deg", d.elevation_deg)),
        look_at=cfg.vec3(top["look_at"]) if "look_at" in top else d.look_at,
        focal_px=float(top.get("focal_px", d.focal_px)),
        width=int(top.get("width", d.width)),
        height=int(top.get("height", d.height)),
    )
    return spec, params


def format_scene(spec: SceneSpec, params: OrbitParams) -> str:
    def fmt(v):
        return " ".join(f"{x:.17g}" for x in v)

    lines = [
        f"channels = {spec.channels}",
        f"resolution = {spec.grid_resolution}",
        f"bbox_min = {fmt(spec.bbox_min)}",
        f"bbox_max = {fmt(spec.bbox_max)}",
        f"orbit_radius = {params.radius:.17g}",
        f"elevation_deg = {params.elevation_deg:.17g}",
        f"look_at = {fmt(params.look_at)}",
        f"focal_px = {params.focal_px:.17g}",
        f"width = {params.width}",
        f"height = {params.height}",
    ]
    for p in spec.primitives:
        if isinstance(p, Sphere):
            lines += ["", "[sphere]", f"center = {fmt(p.center)}", f"radius = {p.radius:.17g}"]
        else:
            lines += ["", "[box]", f"min = {fmt(p.min)}", f"max = {fmt(p.max)}"]
        lines += [f"color = {fmt(p.color)}", f"density = {p.density:.17g}"]
    return "\n".join(lines) + "\n"
