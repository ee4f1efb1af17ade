"""Analytical sequence-length, FLOP and attention-map accounting.

Nothing here is measured.  Costs follow from sequence lengths and model
widths through integer arithmetic only, so two runs always agree exactly.

Conventions: a multiply-add counts as two FLOPs, attention-map memory counts
``heads * Q * KV`` entries per attention layer, and projections are square
``d x d`` matrices.  Wall time and resident memory are out of scope; they
depend on hardware and kernels, so compare reports with each other rather
than with timings.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

from .errors import ConfigurationError
from .layout import ClusterScheme, visible_count
from .tokenizer import CubeSpec


@dataclass(frozen=True)
class CostConfig:
    """Geometry and widths that determine cost.  ``mode`` is ``ar`` (cluster-autoregressive) or ``mae``."""

    frames: int
    height: int
    width: int
    cube: tuple[int, int, int]
    cluster: tuple[int, int, int]
    mask_ratio: float
    embed_dim: int
    num_heads: int
    enc_depth: int
    dec_width: int
    dec_depth: int
    dec_heads: int = 8
    mlp_ratio: int = 4
    mode: str = "ar"
    mae_masking: str = "tube"
    decoder_self_attention: bool = False
    name: str = ""

    def __post_init__(self):
        if self.mode not in ("ar", "mae"):
            raise ConfigurationError(f"cost mode must be ar or mae, got {self.mode!r}")
        if self.mae_masking not in ("tube", "random"):
            raise ConfigurationError(f"mae_masking must be tube or random, got {self.mae_masking!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        self.grid  # divisibility check

    @property
    def grid(self) -> tuple[int, int, int]:
        return CubeSpec(*self.cube).grid_for(self.frames, self.height, self.width)

    @property
    def scheme(self) -> ClusterScheme:
        return ClusterScheme.for_grid(self.grid, self.cluster)

    @classmethod
    def from_train(cls, cfg, name: str = "") -> "CostConfig":
        """Cost view of a :class:`~arclust.config.TrainConfig`."""
        return cls(
            frames=cfg.frames, height=cfg.height, width=cfg.width, cube=tuple(cfg.cube),
            cluster=tuple(cfg.cluster), mask_ratio=cfg.mask_ratio, embed_dim=cfg.embed_dim,
            num_heads=cfg.num_heads, enc_depth=cfg.enc_depth, dec_width=cfg.dec_width,
            dec_depth=cfg.dec_depth, dec_heads=cfg.dec_heads, mlp_ratio=cfg.mlp_ratio, mode=cfg.cost_mode,
            mae_masking=cfg.mae_masking, decoder_self_attention=cfg.decoder_self_attention, name=name,
        )


def mae_visible(grid: tuple[int, int, int], mask_ratio: float, masking: str = "tube") -> int:
    """Visible token count of a masked-autoencoder encoder.

    ``tube`` masks the same spatial positions in every time slice, keeping
    ``n_t * (n_hw - floor(rho * n_hw))`` tokens; ``random`` keeps
    ``round((1 - rho) * N)``.
    """
    n_t, n_h, n_w = grid
    if masking == "tube":
        n_hw = n_h * n_w
        return n_t * (n_hw - math.floor(round(mask_ratio * n_hw, 9)))
    return round((1.0 - mask_ratio) * n_t * n_h * n_w)


def sequence_lengths(cfg: CostConfig) -> tuple[int, int, int, int]:
    """``(enc_q, enc_kv, dec_q, dec_kv)`` for one sample."""
    if cfg.mode == "mae":
        n = math.prod(cfg.grid)
        vis = mae_visible(cfg.grid, cfg.mask_ratio, cfg.mae_masking)
        return vis, vis, n, n
    scheme = cfg.scheme
    m = scheme.num_clusters
    if m < 3:
        raise ConfigurationError("need at least one context and one target cluster")
    enc = (m - 1) * visible_count(scheme.cluster_size, cfg.mask_ratio)
    return enc, enc, (m - 2) * scheme.cluster_size, enc


def self_attention_flops(q: int, d: int) -> int:
    """Four ``d x d`` projections plus scores and the weighted sum."""
    return 8 * q * d * d + 4 * q * q * d


def cross_attention_flops(q: int, kv: int, d: int) -> int:
    """Query/output projections on ``q`` rows, key/value projections on ``kv`` rows, plus scores."""
    return 4 * (q + kv) * d * d + 4 * q * kv * d


def mlp_flops(q: int, d: int, ratio: int) -> int:
    return 4 * ratio * q * d * d


@dataclass(frozen=True)
class CostReport:
    name: str
    mode: str
    enc_q: int
    enc_kv: int
    dec_q: int
    dec_kv: int
    enc_attn_flops_per_layer: int
    dec_attn_flops_per_layer: int
    attn_flops: int
    mlp_flops: int
    enc_map_entries_per_layer: int
    dec_map_entries_per_layer: int
    attn_map_entries: int

    @property
    def total_flops(self) -> int:
        return self.attn_flops + self.mlp_flops

    def row(self) -> dict:
        out = asdict(self)
        out["total_flops"] = self.total_flops
        return out


def attention_cost(lengths, cfg: CostConfig) -> CostReport:
    """Per-layer and total attention FLOPs, MLP FLOPs and attention-map entries.

    Cluster-autoregressive decoder layers are cross-attention only (plus block-causal
    self-attention when enabled); masked-autoencoder decoder layers are full
    self-attention over all ``N`` tokens.
    """
    enc_q, enc_kv, dec_q, dec_kv = lengths
    d, w = cfg.embed_dim, cfg.dec_width
    enc_attn = self_attention_flops(enc_q, d)
    enc_map = cfg.num_heads * enc_q * enc_kv
    h = cfg.dec_heads
    if cfg.mode == "mae":
        dec_attn = self_attention_flops(dec_q, w)
        dec_map = h * dec_q * dec_kv
    else:
        # encoder outputs are first projected from d to the decoder width
        dec_attn = cross_attention_flops(dec_q, dec_kv, w)
        dec_map = h * dec_q * dec_kv
        if cfg.decoder_self_attention:
            dec_attn += self_attention_flops(dec_q, w)
            dec_map += h * dec_q * dec_q
    mlp = cfg.enc_depth * mlp_flops(enc_q, d, cfg.mlp_ratio) + cfg.dec_depth * mlp_flops(dec_q, w, cfg.mlp_ratio)
    return CostReport(
        name=cfg.name, mode=cfg.mode, enc_q=enc_q, enc_kv=enc_kv, dec_q=dec_q, dec_kv=dec_kv,
        enc_attn_flops_per_layer=enc_attn, dec_attn_flops_per_layer=dec_attn,
        attn_flops=cfg.enc_depth * enc_attn + cfg.dec_depth * dec_attn,
        mlp_flops=mlp,
        enc_map_entries_per_layer=enc_map, dec_map_entries_per_layer=dec_map,
        attn_map_entries=cfg.enc_depth * enc_map + cfg.dec_depth * dec_map,
    )


def cost_report(cfg: CostConfig) -> CostReport:
    return attention_cost(sequence_lengths(cfg), cfg)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    rows = [r.row() for r in reports]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["name"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
