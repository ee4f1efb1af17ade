"""Non-overlapping cube tokenization of videos and per-cube regression targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .videodata import VideoTensor


@dataclass(frozen=True)
class CubeSpec:
    p_t: int
    p_h: int
    p_w: int

    def grid_for(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        """Token grid extents for a ``t x h x w`` video; raises if an axis is not divisible."""
        for axis, size, p in (("t", t, self.p_t), ("h", h, self.p_h), ("w", w, self.p_w)):
            if p < 1:
                raise ConfigurationError(f"cube extent along {axis} must be >= 1, got {p}")
            if size % p:
                raise ConfigurationError(
                    f"video extent {size} along axis {axis} is not divisible by cube extent {p}")
        return t // self.p_t, h // self.p_h, w // self.p_w


@dataclass(frozen=True)
class TokenGrid:
    """Cube vectors indexed by token id ``(t * n_h + h) * n_w + w``."""

    n_t: int
    n_h: int
    n_w: int
    cubes: np.ndarray  # (n_t * n_h * n_w, cube_dim)

    @property
    def num_tokens(self) -> int:
        return self.n_t * self.n_h * self.n_w

    @property
    def cube_dim(self) -> int:
        return self.cubes.shape[-1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_t, self.n_h, self.n_w


@dataclass(frozen=True)
class CubeTargets:
    normalized: np.ndarray  # (N, cube_dim)
    mean: np.ndarray  # (N,)
    std: np.ndarray  # (N,)


def cubify_array(x: np.ndarray, spec: CubeSpec) -> np.ndarray:
    """Batched cubify on a raw ``(..., T, H, W, C)`` array, returning ``(..., N, cube_dim)``."""
    *lead, t, h, w, c = x.shape
    n_t, n_h, n_w = spec.grid_for(t, h, w)
    y = x.reshape(*lead, n_t, spec.p_t, n_h, spec.p_h, n_w, spec.p_w, c)
    k = len(lead)
    # -> (..., n_t, n_h, n_w, p_t, p_h, p_w, c)
    axes = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    y = y.transpose(axes)
    return y.reshape(*lead, n_t * n_h * n_w, spec.p_t * spec.p_h * spec.p_w * c)


def cubify(v: VideoTensor, spec: CubeSpec) -> TokenGrid:
    n_t, n_h, n_w = spec.grid_for(v.t_frames, v.height, v.width)
    return TokenGrid(n_t, n_h, n_w, cubify_array(v.data, spec))


def uncubify(g: TokenGrid, spec: CubeSpec) -> VideoTensor:
    p = spec.p_t * spec.p_h * spec.p_w
    if g.cubes.shape[0] != g.num_tokens:
        raise ContractError(f"grid holds {g.cubes.shape[0]} cubes, dims imply {g.num_tokens}")
    if g.cube_dim % p:
        raise ContractError(f"cube_dim {g.cube_dim} is not a multiple of cube volume {p}")
    c = g.cube_dim // p
    y = g.cubes.reshape(g.n_t, g.n_h, g.n_w, spec.p_t, spec.p_h, spec.p_w, c)
    y = y.transpose(0, 3, 1, 4, 2, 5, 6)
    data = y.reshape(g.n_t * spec.p_t, g.n_h * spec.p_h, g.n_w * spec.p_w, c)
    return VideoTensor(np.ascontiguousarray(data))


def normalize_cubes(cubes: np.ndarray, eps: float = 1e-6):
    """Standardize each cube vector along its last axis; returns ``(normalized, mean, std)``."""
    if eps <= 0:
        raise ConfigurationError(f"eps must be > 0, got {eps}")
    mean = cubes.mean(axis=-1, keepdims=True)
    var = cubes.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    return (cubes - mean) / std, mean[..., 0], std[..., 0]


def normalize_targets(g: TokenGrid, eps: float = 1e-6) -> CubeTargets:
    normed, mean, std = normalize_cubes(g.cubes, eps)
    return CubeTargets(normed, mean, std)
