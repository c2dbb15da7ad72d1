"""Core spike-camera types and the binary/text file formats.

Arrays follow one layout throughout the package:

* spike frames are ``uint8`` arrays of shape ``(H, W, C)`` holding 0/1,
* a spike stream stacks them as ``(N, H, W, C)``,
* intensity frames are ``float64`` arrays of shape ``(H, W, C)``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

SPK_MAGIC = b"SPKS"
SPK_VERSION = 1
# magic, version, width, height, channels, reserved, frame_count,
# readout_period_us, start_time_us, threshold
_SPK_HEADER = struct.Struct("<4sHHHBBIIId")
SPK_HEADER_SIZE = _SPK_HEADER.size  # 32

TRAJ_TAG = "traj v1"
ORTHO_TOL = 1e-6


class FormatError(ValueError):
    """Raised when a serialized artifact cannot be decoded."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def check_spike_frame(frame: np.ndarray) -> np.ndarray:
    """Validate a (H, W, C) binary frame and return it as uint8."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ValueError(f"spike frame must be (H, W, C), got shape {frame.shape}")
    if frame.size and not np.isin(frame, (0, 1)).all():
        raise ValueError("spike frame elements must be 0 or 1")
    return frame.astype(np.uint8, copy=False)


def check_intensity_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ValueError(f"intensity frame must be (H, W, C), got shape {frame.shape}")
    if not np.isfinite(frame).all():
        raise ValueError("intensity frame contains non-finite values")
    if (frame < 0).any():
        raise ValueError("intensity frame contains negative values")
    return frame


@dataclass(frozen=True, eq=False)
class SpikeStream:
    """Binary H x W x N x C spike stream with its readout metadata."""

    bits: np.ndarray
    readout_period_us: int
    threshold: float
    start_time_us: int = 0

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 4:
            raise ValueError(f"stream bits must be (N, H, W, C), got shape {bits.shape}")
        if bits.size and bits.max(initial=0) > 1:
            raise ValueError("stream elements must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8, copy=False))
        if int(self.readout_period_us) <= 0:
            raise ValueError("readout_period_us must be positive")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if int(self.start_time_us) < 0:
            raise ValueError("start_time_us must be nonnegative")
        object.__setattr__(self, "readout_period_us", int(self.readout_period_us))
        object.__setattr__(self, "start_time_us", int(self.start_time_us))
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def n_frames(self) -> int:
        return self.bits.shape[0]

    @property
    def height(self) -> int:
        return self.bits.shape[1]

    @property
    def width(self) -> int:
        return self.bits.shape[2]

    @property
    def channels(self) -> int:
        return self.bits.shape[3]

    def frame(self, i: int) -> np.ndarray:
        return self.bits[i]

    def timestamp_us(self, i: int) -> int:
        return self.start_time_us + i * self.readout_period_us

    def timestamps_us(self) -> np.ndarray:
        return self.start_time_us + np.arange(self.n_frames, dtype=np.int64) * self.readout_period_us

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpikeStream):
            return NotImplemented
        return (
            self.readout_period_us == other.readout_period_us
            and self.threshold == other.threshold
            and self.start_time_us == other.start_time_us
            and self.bits.shape == other.bits.shape
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pinhole camera: OpenGL-style axes (x right, y up, looking down -z)."""

    camera_to_world: np.ndarray
    focal_px: float
    width: int
    height: int
    timestamp_us: int = 0

    def __post_init__(self) -> None:
        m = np.array(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=0, rtol=0):
            raise ValueError("camera_to_world last row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("camera_to_world rotation is not orthonormal")
        m.setflags(write=False)
        object.__setattr__(self, "camera_to_world", m)
        if not self.focal_px > 0:
            raise ValueError("focal_px must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "focal_px", float(self.focal_px))
        object.__setattr__(self, "timestamp_us", int(self.timestamp_us))

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.camera_to_world, other.camera_to_world)
            and self.focal_px == other.focal_px
            and self.width == other.width
            and self.height == other.height
            and self.timestamp_us == other.timestamp_us
        )


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        for a, b in zip(poses, poses[1:]):
            if b.timestamp_us <= a.timestamp_us:
                raise ValueError("trajectory timestamps must be strictly increasing")
        if poses:
            first = poses[0]
            for p in poses:
                if (p.focal_px, p.width, p.height) != (first.focal_px, first.width, first.height):
                    raise ValueError("all poses of a trajectory must share intrinsics")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.poses[i])
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def check_aligned(self, stream: SpikeStream) -> None:
        """Raise unless pose i sits exactly at the timestamp of frame i."""
        if len(self) != stream.n_frames:
            raise ValueError(
                f"trajectory has {len(self)} poses but stream has {stream.n_frames} frames"
            )
        for i, p in enumerate(self.poses):
            if p.timestamp_us != stream.timestamp_us(i):
                raise ValueError(f"pose {i} timestamp {p.timestamp_us} != frame timestamp")
        if self.poses and (self.poses[0].height, self.poses[0].width) != (
            stream.height,
            stream.width,
        ):
            raise ValueError("trajectory image size differs from stream size")


# ---------------------------------------------------------------------------
# Frame packing and the .spk container
# ---------------------------------------------------------------------------


def packed_frame_size(width: int, height: int, channels: int) -> int:
    return (width * height * channels + 7) // 8


def pack_frame(frame: np.ndarray) -> bytes:
    """Serialize a (H, W, C) binary frame, channel-major then row-major, LSB first."""
    frame = check_spike_frame(frame)
    flat = np.ascontiguousarray(frame.transpose(2, 0, 1)).reshape(-1)
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_frame(data: bytes, width: int, height: int, channels: int) -> np.ndarray:
    n_bits = width * height * channels
    expected = packed_frame_size(width, height, channels)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for a {width}x{height}x{channels} frame, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n_bits, bitorder="little")
    return np.ascontiguousarray(bits.reshape(channels, height, width).transpose(1, 2, 0))


def _pack_frames(bits: np.ndarray) -> bytes:
    n, h, w, c = bits.shape
    if n == 0:
        return b""
    flat = np.ascontiguousarray(bits.transpose(0, 3, 1, 2)).reshape(n, -1)
    return np.packbits(flat, axis=1, bitorder="little").tobytes()


def write_stream(stream: SpikeStream, sink: BinaryIO) -> int:
    """Write ``stream`` as a .spk container; returns the number of bytes written."""
    if max(stream.width, stream.height) > 0xFFFF or stream.channels > 0xFF:
        raise ValueError("stream dimensions exceed the container limits")
    if stream.start_time_us > 0xFFFFFFFF or stream.readout_period_us > 0xFFFFFFFF:
        raise ValueError("timing fields exceed 32 bits")
    header = _SPK_HEADER.pack(
        SPK_MAGIC,
        SPK_VERSION,
        stream.width,
        stream.height,
        stream.channels,
        0,
        stream.n_frames,
        stream.readout_period_us,
        stream.start_time_us,
        stream.threshold,
    )
    payload = _pack_frames(stream.bits)
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def read_stream(source: BinaryIO) -> SpikeStream:
    header = source.read(SPK_HEADER_SIZE)
    if len(header) < 4 or header[:4] != SPK_MAGIC:
        raise BadMagicError("not a .spk stream (bad magic)")
    if len(header) < SPK_HEADER_SIZE:
        raise TruncatedError("truncated .spk header")
    (_, version, width, height, channels, _, n_frames, period, start, threshold) = _SPK_HEADER.unpack(header)
    if version != SPK_VERSION:
        raise BadVersionError(f"unsupported .spk version {version}")
    frame_bytes = packed_frame_size(width, height, channels)
    payload = source.read(frame_bytes * n_frames)
    if len(payload) != frame_bytes * n_frames:
        raise TruncatedError(
            f"truncated .spk payload: expected {frame_bytes * n_frames} bytes, got {len(payload)}"
        )
    n_bits = width * height * channels
    if n_frames:
        packed = np.frombuffer(payload, dtype=np.uint8).reshape(n_frames, frame_bytes)
        flat = np.unpackbits(packed, axis=1, count=n_bits, bitorder="little")
        bits = flat.reshape(n_frames, channels, height, width).transpose(0, 2, 3, 1)
    else:
        bits = np.zeros((0, height, width, channels), dtype=np.uint8)
    try:
        return SpikeStream(np.ascontiguousarray(bits), period, threshold, start)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_stream(stream: SpikeStream, path) -> int:
    with open(path, "wb") as fh:
        return write_stream(stream, fh)


def load_stream(path) -> SpikeStream:
    with open(path, "rb") as fh:
        return read_stream(fh)


def stream_to_bytes(stream: SpikeStream) -> bytes:
    buf = io.BytesIO()
    write_stream(stream, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Trajectory text file
# ---------------------------------------------------------------------------


def write_trajectory(traj: Trajectory, sink) -> None:
    if not len(traj):
        raise ValueError("cannot serialize an empty trajectory")
    p0 = traj[0]
    sink.write(f"{TRAJ_TAG} {p0.focal_px:.17g} {p0.width} {p0.height}\n")
    for p in traj:
        vals = " ".join(f"{v:.17g}" for v in p.camera_to_world.reshape(-1))
        sink.write(f"{p.timestamp_us} {vals}\n")


def read_trajectory(source) -> Trajectory:
    lines = [ln for ln in source.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty trajectory file")
    head = lines[0].split()
    if head[:2] != TRAJ_TAG.split() or len(head) != 5:
        raise FormatError(f"bad trajectory header: {lines[0]!r}")
    try:
        focal, width, height = float(head[2]), int(head[3]), int(head[4])
        poses = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 17:
                raise FormatError(f"trajectory line must have 17 fields, got {len(parts)}")
            m = np.array([float(v) for v in parts[1:]]).reshape(4, 4)
            poses.append(CameraPose(m, focal, width, height, int(parts[0])))
        return Trajectory(tuple(poses))
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_trajectory(traj, fh)


def load_trajectory(path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return read_trajectory(fh)


# ---------------------------------------------------------------------------
# PGM / PPM images with an i_max sidecar
# ---------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".imax")


def write_image(path, frame: np.ndarray, i_max: float = 1.0) -> None:
    """Write a gray (P5) or RGB (P6) 8-bit image; [0, i_max] maps to [0, 255]."""
    path = Path(path)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[..., None]
    h, w, c = frame.shape
    if c not in (1, 3):
        raise ValueError("images must have 1 or 3 channels")
    if not i_max > 0:
        raise ValueError("i_max must be positive")
    q = np.clip(np.rint(frame / i_max * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(q).tobytes())
    _sidecar(path).write_text(f"i_max {float(i_max):.17g}\n", encoding="utf-8")


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a P5/P6 image back to a float (H, W, C) frame using its sidecar i_max."""
    path = Path(path)
    data = path.read_bytes()
    tokens, pos = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: not a binary PGM/PPM image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    c = 1 if magic == b"P5" else 3
    raw = data[pos : pos + w * h * c]
    if len(raw) != w * h * c:
        raise TruncatedError(f"{path}: truncated pixel data")
    i_max = 1.0
    side = _sidecar(path)
    if side.exists():
        parts = side.read_text(encoding="utf-8").split()
        if len(parts) != 2 or parts[0] != "i_max":
            raise FormatError(f"{side}: malformed sidecar")
        i_max = float(parts[1])
    q = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    return q.astype(np.float64) * (i_max / 255.0)


def image_suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))


def stack_frames(frames: Iterable[np.ndarray]) -> np.ndarray:
    arr = [check_intensity_frame(f) for f in frames]
    if not arr:
        raise ValueError("no frames")
    shape = arr[0].shape
    for f in arr:
        if f.shape != shape:
            raise ValueError(f"frame shape {f.shape} differs from {shape}")
    return np.stack(arr)
