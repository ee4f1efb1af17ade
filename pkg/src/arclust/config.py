"""Run configuration and its ``key = value`` text format.

One flat :class:`TrainConfig` carries everything a run needs: data, cube and
cluster geometry, model widths, optimizer and probe settings.  Text files hold
one ``key = value`` pair per line; ``#`` starts a comment and unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .layout import ClusterScheme, OrderPolicy
from .model import ModelConfig
from .tokenizer import CubeSpec
from .videodata import MotionTaskSpec


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 20
    cosine: bool = True
    seed: int = 0
    precision: int = 32
    # autoregressive layout
    mask_ratio: float = 0.8
    order_policy: str = "random"
    cluster: tuple[int, int, int] = (2, 2, 2)
    cube: tuple[int, int, int] = (2, 8, 8)
    targets: str = "full"
    normalize_targets: bool = True
    norm_eps: float = 1e-6
    # model
    embed_dim: int = 96
    num_heads: int = 4
    enc_depth: int = 4
    dec_width: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    decoder_self_attention: bool = False
    # data
    data_dir: str = ""
    num_videos: int = 800
    data_seed: int = 0
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    num_directions: int = 8
    shape_size: int = 8
    speed: int = 2
    noise: float = 0.0
    # probing
    probe_steps: int = 300
    probe_lr: float = 1e-2
    probe_batch: int = 32
    probe_weight_decay: float = 0.0
    # cost accounting
    cost_mode: str = "ar"
    mae_masking: str = "tube"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.precision not in (32, 64):
            raise ConfigurationError(f"precision must be 32 or 64, got {self.precision}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.seed < 0 or self.data_seed < 0:
            raise ConfigurationError("seeds must be non-negative")
        OrderPolicy.parse(self.order_policy)
        if self.targets not in ("full", "visible-only"):
            raise ConfigurationError(f"targets must be full or visible-only, got {self.targets!r}")
        if self.cost_mode not in ("ar", "mae"):
            raise ConfigurationError(f"cost_mode must be ar or mae, got {self.cost_mode!r}")
        if self.mae_masking not in ("tube", "random"):
            raise ConfigurationError(f"mae_masking must be tube or random, got {self.mae_masking!r}")

    # ---- derived objects

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def cube_spec(self) -> CubeSpec:
        return CubeSpec(*self.cube)

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.cube_spec.grid_for(self.frames, self.height, self.width)

    @property
    def scheme(self) -> ClusterScheme:
        return ClusterScheme.for_grid(self.grid, self.cluster)

    @property
    def policy(self) -> OrderPolicy:
        return OrderPolicy.parse(self.order_policy)

    @property
    def cube_dim(self) -> int:
        p_t, p_h, p_w = self.cube
        return p_t * p_h * p_w * self.channels

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            cube_dim=self.cube_dim, grid=self.grid, embed_dim=self.embed_dim, num_heads=self.num_heads,
            enc_depth=self.enc_depth, dec_width=self.dec_width, dec_depth=self.dec_depth, dec_heads=self.dec_heads,
            mlp_ratio=self.mlp_ratio, decoder_self_attention=self.decoder_self_attention,
            num_classes=self.num_directions,
        )

    def task_spec(self) -> MotionTaskSpec:
        return MotionTaskSpec(
            t_frames=self.frames, height=self.height, width=self.width, channels=self.channels,
            num_directions=self.num_directions, shape_size=self.shape_size, speed=self.speed,
            seed=self.data_seed, noise=self.noise,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ---- text format

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_pairs(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_pairs(text: str) -> dict:
    """Parse ``key = value`` lines into typed field values, rejecting unknown keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def parse_value(key: str, value: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "on", "off", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "on", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = value.replace("x", ",").replace("×", ",").split(",")
            parsed = tuple(int(p) for p in parts)
            if len(parsed) != len(default):
                raise ValueError(value)
            return parsed
        return value
    except ValueError:
        raise ConfigurationError(f"invalid value {value!r} for key {key!r}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


DESK = TrainConfig()

# Paper-scale geometry: 16x224x224 RGB clips, 2x16x16 cubes, 2x7x7 clusters,
# ViT-B encoder and a 512-wide, 4-deep, 8-head decoder.
PAPER = TrainConfig(
    frames=16, height=224, width=224, channels=3, cube=(2, 16, 16), cluster=(2, 7, 7),
    embed_dim=768, num_heads=12, enc_depth=12, dec_width=512, dec_depth=4, dec_heads=8, mask_ratio=0.8,
)

PAPER_MAE = PAPER.replace(cost_mode="mae", mask_ratio=0.9)
