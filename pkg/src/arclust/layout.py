"""Cluster partitions, prediction orders, visible-token subsampling and attention masks.

Terminology used throughout:

* token id: row-major index ``(t * n_h + h) * n_w + w`` into the token grid;
* cluster id: row-major index ``(ct * c_h + ch) * c_w + cw`` into the cluster grid;
* order position: 0-based slot of a cluster in the prediction order.

A layout drops the final cluster of the order entirely.  The remaining
``M - 1`` clusters feed the encoder (thinned to their visible tokens), and the
clusters at positions ``1 .. M - 2`` are prediction targets, each predicted in
full from clusters at strictly earlier positions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import streams
from .errors import ConfigurationError


@dataclass(frozen=True)
class ClusterScheme:
    """Grouping of a token grid into ``k_t x k_h x k_w`` clusters."""

    k_t: int
    k_h: int
    k_w: int
    n_t: int
    n_h: int
    n_w: int

    def __post_init__(self):
        for axis, k, n in (("t", self.k_t, self.n_t), ("h", self.k_h, self.n_h), ("w", self.k_w, self.n_w)):
            if k < 1 or n < 1:
                raise ConfigurationError(f"cluster/grid extents along {axis} must be >= 1")
            if n % k:
                raise ConfigurationError(
                    f"token grid extent {n} along axis {axis} is not divisible by cluster extent {k}")

    @classmethod
    def for_grid(cls, grid_dims, k) -> "ClusterScheme":
        return cls(*k, *grid_dims)

    @property
    def c_t(self) -> int:
        return self.n_t // self.k_t

    @property
    def c_h(self) -> int:
        return self.n_h // self.k_h

    @property
    def c_w(self) -> int:
        return self.n_w // self.k_w

    @property
    def num_clusters(self) -> int:
        return self.c_t * self.c_h * self.c_w

    @property
    def cluster_size(self) -> int:
        return self.k_t * self.k_h * self.k_w

    @property
    def num_tokens(self) -> int:
        return self.n_t * self.n_h * self.n_w

    def cluster_triple(self, cid: int) -> tuple[int, int, int]:
        ct, rest = divmod(int(cid), self.c_h * self.c_w)
        ch, cw = divmod(rest, self.c_w)
        return ct, ch, cw

    def cluster_index(self, triple) -> int:
        ct, ch, cw = triple
        return (ct * self.c_h + ch) * self.c_w + cw

    def token_coords(self) -> np.ndarray:
        """``(N, 3)`` array of ``(t, h, w)`` for every token id."""
        t, h, w = np.meshgrid(np.arange(self.n_t), np.arange(self.n_h), np.arange(self.n_w), indexing="ij")
        return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


class OrderPolicy(enum.Enum):
    SPATIAL_FIRST = "spatial-first"
    TEMPORAL_FIRST = "temporal-first"
    RANDOM_RASTER = "random"

    @classmethod
    def parse(cls, text: str) -> "OrderPolicy":
        key = text.strip().lower().replace("_", "-")
        aliases = {"spatial": "spatial-first", "temporal": "temporal-first", "random-raster": "random"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ConfigurationError(f"unknown order policy {text!r}")


def build_cluster_partition(scheme: ClusterScheme) -> dict[tuple[int, int, int], np.ndarray]:
    """Map each cluster triple to its token ids, listed in (t, h, w) row-major order."""
    table = partition_table(scheme)
    return {scheme.cluster_triple(c): table[c] for c in range(scheme.num_clusters)}


def partition_table(scheme: ClusterScheme) -> np.ndarray:
    """``(M, cluster_size)`` array whose row ``c`` lists the token ids of cluster ``c``."""
    ids = np.arange(scheme.num_tokens).reshape(
        scheme.c_t, scheme.k_t, scheme.c_h, scheme.k_h, scheme.c_w, scheme.k_w)
    ids = ids.transpose(0, 2, 4, 1, 3, 5)
    return ids.reshape(scheme.num_clusters, scheme.cluster_size)


def token_cluster(scheme: ClusterScheme) -> np.ndarray:
    """Cluster id of every token id."""
    coords = scheme.token_coords()
    ct = coords[:, 0] // scheme.k_t
    ch = coords[:, 1] // scheme.k_h
    cw = coords[:, 2] // scheme.k_w
    return (ct * scheme.c_h + ch) * scheme.c_w + cw


@dataclass(frozen=True)
class OrderPlan:
    permutation: np.ndarray  # cluster ids, position -> cluster

    def positions(self) -> np.ndarray:
        """Inverse permutation: cluster id -> order position."""
        pos = np.empty_like(self.permutation)
        pos[self.permutation] = np.arange(len(self.permutation))
        return pos


def make_order(scheme: ClusterScheme, policy: OrderPolicy, seed: int = 0,
               rng: np.random.Generator | None = None) -> OrderPlan:
    """Prediction order over all clusters.

    Spatial-first walks every spatial cluster of one temporal slot before
    moving to the next slot; temporal-first walks the temporal axis at each
    spatial location first.  Random raster shuffles all clusters with a
    Fisher-Yates pass drawn from ``rng`` (or a stream derived from ``seed``).
    """
    c_t, c_s = scheme.c_t, scheme.c_h * scheme.c_w
    if policy is OrderPolicy.SPATIAL_FIRST:
        perm = np.arange(scheme.num_clusters)
    elif policy is OrderPolicy.TEMPORAL_FIRST:
        perm = np.arange(scheme.num_clusters).reshape(c_t, c_s).T.ravel()
    else:
        if rng is None:
            rng = streams.substream(seed, streams.ORDER)
        perm = streams.fisher_yates(scheme.num_clusters, rng)
    return OrderPlan(np.ascontiguousarray(perm))


def visible_count(cluster_size: int, mask_ratio: float) -> int:
    """Tokens retained per cluster: ``ceil((1 - mask_ratio) * cluster_size)``."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigurationError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    # guard against 0.2 * 98 = 19.600000000000001 style float noise pushing ceil up
    return min(cluster_size, math.ceil(round((1.0 - mask_ratio) * cluster_size, 9)))


def subsample_visible(token_ids: np.ndarray, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Keep a uniform random subset of ``visible_count`` tokens, returned sorted by id."""
    token_ids = np.asarray(token_ids)
    k = visible_count(len(token_ids), mask_ratio)
    if k == len(token_ids):
        return np.sort(token_ids)
    picks = streams.fisher_yates(len(token_ids), rng, k)
    return np.sort(token_ids[picks])


@dataclass(frozen=True)
class LayoutPlan:
    """Per-sample materialization of one autoregressive training example."""

    order: np.ndarray  # (M,) cluster ids by order position
    kept_clusters: np.ndarray  # (M-1,)
    visible_tokens: tuple  # per kept cluster, sorted visible token ids
    encoder_tokens: np.ndarray  # (L,)
    enc_pos: np.ndarray  # (L,) order position of each encoder token's cluster
    target_clusters: np.ndarray  # (M-2,)
    decoder_tokens: np.ndarray  # (Q,)
    dec_pos: np.ndarray  # (Q,)

    @property
    def enc_len(self) -> int:
        return len(self.encoder_tokens)

    @property
    def dec_len(self) -> int:
        return len(self.decoder_tokens)

    @property
    def enc_mask(self) -> np.ndarray:
        return block_causal_mask(self.enc_pos, self.enc_pos)

    @property
    def cross_mask(self) -> np.ndarray:
        return strict_causal_mask(self.dec_pos, self.enc_pos)


def block_causal_mask(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """``mask[i, j] = q_pos[i] >= k_pos[j]``: full inside a cluster, causal across clusters."""
    return q_pos[..., :, None] >= k_pos[..., None, :]


def strict_causal_mask(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """``mask[i, j] = q_pos[i] > k_pos[j]``: only strictly earlier clusters."""
    return q_pos[..., :, None] > k_pos[..., None, :]


def assemble_layout(scheme: ClusterScheme, order: OrderPlan, mask_ratio: float,
                    rng: np.random.Generator | None = None, *, targets: str = "full",
                    cluster_rngs=None) -> LayoutPlan:
    """Drop the last cluster of ``order``, subsample the rest and lay out encoder/decoder sequences.

    Visible tokens are drawn per cluster; pass either one ``rng`` shared by all
    clusters or ``cluster_rngs``, a callable ``position -> Generator`` giving an
    independent stream per kept cluster.  ``targets="visible-only"`` predicts
    only the visible tokens of each target cluster instead of the full cluster.
    """
    m = scheme.num_clusters
    if m < 3:
        raise ConfigurationError(
            f"need at least one context and one target cluster (M >= 3), got M={m}")
    if targets not in ("full", "visible-only"):
        raise ConfigurationError(f"targets must be 'full' or 'visible-only', got {targets!r}")
    perm = np.asarray(order.permutation)
    if sorted(perm.tolist()) != list(range(m)):
        raise ConfigurationError("order is not a permutation of the cluster ids")
    table = partition_table(scheme)
    kept = perm[:-1]
    visible = []
    for pos, cid in enumerate(kept):
        r = cluster_rngs(pos) if cluster_rngs is not None else rng
        if r is None and visible_count(scheme.cluster_size, mask_ratio) < scheme.cluster_size:
            raise ConfigurationError("a generator is required when mask_ratio > 0")
        visible.append(subsample_visible(table[cid], mask_ratio, r))
    enc_tokens = np.concatenate(visible)
    enc_pos = np.concatenate([np.full(len(v), p) for p, v in enumerate(visible)])
    target_clusters = kept[1:]
    if targets == "full":
        dec_blocks = [table[c] for c in target_clusters]
    else:
        dec_blocks = visible[1:]
    dec_tokens = np.concatenate(dec_blocks)
    dec_pos = np.concatenate([np.full(len(b), p + 1) for p, b in enumerate(dec_blocks)])
    return LayoutPlan(
        order=perm, kept_clusters=kept, visible_tokens=tuple(visible),
        encoder_tokens=enc_tokens, enc_pos=enc_pos, target_clusters=target_clusters,
        decoder_tokens=dec_tokens, dec_pos=dec_pos,
    )


def sample_layout(scheme: ClusterScheme, policy: OrderPolicy, mask_ratio: float, seed: int,
                  *coords: int, targets: str = "full") -> LayoutPlan:
    """Layout for one sample with every draw keyed by ``(seed, *coords)``.

    The order uses stream ``(ORDER, *coords)`` and the visible subset of the
    cluster at position ``p`` uses ``(MASK, *coords, p)``, so layouts can be
    regenerated independently of each other.
    """
    order = make_order(scheme, policy, rng=streams.substream(seed, streams.ORDER, *coords))
    return assemble_layout(
        scheme, order, mask_ratio, targets=targets,
        cluster_rngs=lambda p: streams.substream(seed, streams.MASK, *coords, p))


def permute_storage(plan: LayoutPlan, enc_block_perm, dec_block_perm=None) -> LayoutPlan:
    """Reorder the stored cluster blocks of a plan without changing any order position.

    ``enc_block_perm[i]`` names the kept-cluster block stored at slot ``i``.
    Attention depends on positions only, so model outputs are invariant up to
    the same re-indexing.
    """
    enc_blocks = _blocks(plan.enc_pos)
    enc_idx = np.concatenate([enc_blocks[b] for b in enc_block_perm])
    plan = replace(plan, encoder_tokens=plan.encoder_tokens[enc_idx], enc_pos=plan.enc_pos[enc_idx])
    if dec_block_perm is not None:
        dec_blocks = _blocks(plan.dec_pos)
        dec_idx = np.concatenate([dec_blocks[b] for b in dec_block_perm])
        plan = replace(plan, decoder_tokens=plan.decoder_tokens[dec_idx], dec_pos=plan.dec_pos[dec_idx])
    return plan


def _blocks(pos: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(pos == p) for p in np.unique(pos)]


def prefix_layout(plan: LayoutPlan, position: int) -> LayoutPlan:
    """Restrict a plan to predicting the target at ``position`` from clusters before it.

    Only encoder tokens at earlier positions are kept, so the decoder's
    cross-attention needs no mask at all.
    """
    if not 1 <= position < len(plan.kept_clusters):
        raise ConfigurationError(f"target position must be in [1, {len(plan.kept_clusters) - 1}]")
    keep = plan.enc_pos < position
    tgt = plan.dec_pos == position
    return replace(
        plan, encoder_tokens=plan.encoder_tokens[keep], enc_pos=plan.enc_pos[keep],
        decoder_tokens=plan.decoder_tokens[tgt], dec_pos=plan.dec_pos[tgt],
        target_clusters=plan.target_clusters[position - 1: position],
    )


@dataclass(frozen=True)
class BatchLayout:
    """Plans of equal sequence lengths stacked along a leading batch axis."""

    encoder_tokens: np.ndarray  # (B, L)
    enc_pos: np.ndarray  # (B, L)
    decoder_tokens: np.ndarray  # (B, Q)
    dec_pos: np.ndarray  # (B, Q)

    @classmethod
    def stack(cls, plans) -> "BatchLayout":
        plans = list(plans)
        if len({p.enc_len for p in plans}) != 1 or len({p.dec_len for p in plans}) != 1:
            raise ConfigurationError("all plans in a batch must share enc_len and dec_len")
        return cls(
            np.stack([p.encoder_tokens for p in plans]), np.stack([p.enc_pos for p in plans]),
            np.stack([p.decoder_tokens for p in plans]), np.stack([p.dec_pos for p in plans]),
        )

    @property
    def batch_size(self) -> int:
        return self.encoder_tokens.shape[0]

    @property
    def enc_mask(self) -> np.ndarray:
        return block_causal_mask(self.enc_pos, self.enc_pos)

    @property
    def cross_mask(self) -> np.ndarray:
        return strict_causal_mask(self.dec_pos, self.enc_pos)

    @property
    def dec_self_mask(self) -> np.ndarray:
        return block_causal_mask(self.dec_pos, self.dec_pos)


def full_batch_layout(num_tokens: int, batch_size: int) -> BatchLayout:
    """All tokens visible with full attention (downstream use); no decoder queries."""
    ids = np.broadcast_to(np.arange(num_tokens), (batch_size, num_tokens))
    zeros = np.zeros((batch_size, num_tokens), dtype=np.int64)
    empty = np.zeros((batch_size, 0), dtype=np.int64)
    return BatchLayout(np.array(ids), zeros, empty, empty)


def mask_to_csv(mask: np.ndarray) -> str:
    return "\n".join(",".join("1" if v else "0" for v in row) for row in mask) + "\n"


def mask_to_pgm(mask: np.ndarray) -> bytes:
    """Binary PGM (P5) with admissible entries white."""
    rows, cols = mask.shape
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + (mask.astype(np.uint8) * 255).tobytes()
