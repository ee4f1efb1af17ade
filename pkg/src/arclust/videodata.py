"""Synthetic moving-square videos and the ARVV1 raw video file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import streams
from .errors import ConfigurationError, ParseError

MAGIC = b"ARVV"
VERSION = 1
DTYPE_F32LE = 1
_HEADER = struct.Struct("<4sBBH4I")
_MAX_ELEMENTS = 2**31

# (dy, dx) unit steps, counter-clockwise from "right" with rows growing downward
DIRECTIONS_8 = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
DIRECTIONS_4 = ((0, 1), (-1, 0), (0, -1), (1, 0))


@dataclass(frozen=True)
class VideoTensor:
    """Dense video of shape ``(t_frames, height, width, channels)`` with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigurationError(f"video data must be 4-D (t,h,w,c), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("video data contains non-finite values")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ConfigurationError("video values must lie in [0, 1]")

    @property
    def t_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabeledVideo:
    video: VideoTensor
    label: int


@dataclass(frozen=True)
class MotionTaskSpec:
    """Parameters of the moving-square classification task.

    ``noise`` is the amplitude of uniform additive noise (0 disables it);
    ``speed`` is the per-axis displacement in pixels per frame, so diagonal
    directions move by ``speed`` along both rows and columns.
    """

    t_frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    num_directions: int = 8
    shape_size: int = 8
    speed: int = 2
    seed: int = 0
    noise: float = 0.0

    def validate(self) -> None:
        for name in ("t_frames", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_directions not in (4, 8):
            raise ConfigurationError(f"num_directions must be 4 or 8, got {self.num_directions}")
        if not 1 <= self.shape_size < min(self.height, self.width):
            raise ConfigurationError(
                f"shape_size must be in [1, min(height, width)), got {self.shape_size}"
            )
        if self.speed < 0:
            raise ConfigurationError(f"speed must be >= 0, got {self.speed}")
        if not 0.0 <= self.noise <= 0.1:
            raise ConfigurationError(f"noise must be in [0, 0.1], got {self.noise}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def directions(self) -> tuple[tuple[int, int], ...]:
        return DIRECTIONS_8 if self.num_directions == 8 else DIRECTIONS_4


def label_for_index(spec: MotionTaskSpec, index: int) -> int:
    return index % spec.num_directions


def generate_moving_shape(spec: MotionTaskSpec, index: int) -> LabeledVideo:
    """Render sample ``index`` of the task: a unit-intensity square moving with wrap-around.

    The label is the motion direction, assigned round-robin by index.  The
    square's initial center and the noise field come from a single seeded
    substream, so ``(spec, index)`` fully determines the output.
    """
    spec.validate()
    if index < 0:
        raise ConfigurationError(f"index must be >= 0, got {index}")
    label = label_for_index(spec, index)
    rng = streams.substream(spec.seed, streams.DATA, index)
    cy, cx = int(rng.integers(spec.height)), int(rng.integers(spec.width))
    dy, dx = spec.directions[label]
    vy, vx = dy * spec.speed, dx * spec.speed

    t = np.arange(spec.t_frames)
    half = spec.shape_size // 2
    offs = np.arange(spec.shape_size) - half
    rows = (cy + vy * t[:, None] + offs[None, :]) % spec.height  # (T, s)
    cols = (cx + vx * t[:, None] + offs[None, :]) % spec.width
    frames = np.zeros((spec.t_frames, spec.height, spec.width), dtype=np.float32)
    frames[t[:, None, None], rows[:, :, None], cols[:, None, :]] = 1.0

    data = np.repeat(frames[..., None], spec.channels, axis=3)
    if spec.noise > 0:
        data = data + rng.uniform(0.0, spec.noise, size=data.shape).astype(np.float32)
        np.clip(data, 0.0, 1.0, out=data)
    return LabeledVideo(VideoTensor(data), label)


def generate_corpus(spec: MotionTaskSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples ``0..count-1`` into ``(count, T, H, W, C)`` float32 videos and int labels."""
    items = [generate_moving_shape(spec, i) for i in range(count)]
    videos = np.stack([it.video.data for it in items]) if items else np.zeros(
        (0, spec.t_frames, spec.height, spec.width, spec.channels), dtype=np.float32)
    labels = np.array([it.label for it in items], dtype=np.int64)
    return videos, labels


def write_video_file(path, v: VideoTensor) -> None:
    t, h, w, c = v.shape
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32LE, 0, t, h, w, c)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_video_file(path) -> VideoTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw)]:
            raise ParseError("bad magic")
        raise ParseError("truncated header")
    magic, version, dtype, reserved, t, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ParseError("bad magic")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}")
    if dtype != DTYPE_F32LE:
        raise ParseError(f"unsupported dtype code {dtype}")
    if reserved != 0:
        raise ParseError("reserved header bytes must be zero")
    count = t * h * w * c
    if count >= _MAX_ELEMENTS:
        raise ParseError(f"dimension overflow: {t}x{h}x{w}x{c} elements")
    body = raw[_HEADER.size:]
    if len(body) < 4 * count:
        raise ParseError(f"truncated payload: expected {4 * count} bytes, found {len(body)}")
    if len(body) > 4 * count:
        raise ParseError(f"trailing bytes after payload: {len(body) - 4 * count}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(t, h, w, c)
    try:
        return VideoTensor(data)
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from None


def write_corpus(directory, spec: MotionTaskSpec, count: int) -> list[Path]:
    """Write ``count`` samples as ``video_XXXXXX.arvv`` plus a ``labels.csv`` index."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    lines = ["index,file,label"]
    for i in range(count):
        item = generate_moving_shape(spec, i)
        p = out / f"video_{i:06d}.arvv"
        write_video_file(p, item.video)
        paths.append(p)
        lines.append(f"{i},{p.name},{item.label}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n")
    return paths


def read_corpus(directory) -> tuple[np.ndarray, np.ndarray]:
    """Load a directory written by :func:`write_corpus`."""
    d = Path(directory)
    index = d / "labels.csv"
    if not index.exists():
        raise ParseError(f"missing labels.csv in {d}")
    rows = index.read_text().strip().splitlines()[1:]
    videos, labels = [], []
    for row in rows:
        _, name, label = row.split(",")
        videos.append(read_video_file(d / name).data)
        labels.append(int(label))
    if not videos:
        raise ParseError(f"empty corpus in {d}")
    return np.stack(videos), np.array(labels, dtype=np.int64)
