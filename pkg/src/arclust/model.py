"""Block-causal video encoder, cross-attention decoder, pretraining loss and probe head.

Parameters live in a flat ``dict[str, np.ndarray]``; :class:`Net` binds them to
a :class:`~arclust.tensorad.Tape` (trainable) or wraps them as constants
(inference).  All sequence tensors carry a leading batch axis.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import streams
from . import tensorad as ad
from .errors import ConfigurationError, ContractError
from .layout import BatchLayout, LayoutPlan, full_batch_layout
from .tokenizer import TokenGrid

POS_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    cube_dim: int
    grid: tuple[int, int, int]
    embed_dim: int = 96
    num_heads: int = 4
    enc_depth: int = 4
    dec_width: int = 512
    dec_depth: int = 4
    dec_heads: int = 8
    mlp_ratio: int = 4
    decoder_self_attention: bool = False
    num_classes: int = 8
    ln_eps: float = 1e-6
    use_pos_embed: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.dec_heads < 1:
            raise ConfigurationError("num_heads and dec_heads must be >= 1")
        for name, heads in (("embed_dim", "num_heads"), ("dec_width", "dec_heads")):
            if getattr(self, name) % getattr(self, heads):
                raise ConfigurationError(
                    f"{name}={getattr(self, name)} is not divisible by {heads}={getattr(self, heads)}")
        for name in ("cube_dim", "embed_dim", "dec_width", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigurationError("depths must be >= 0")

    @property
    def num_tokens(self) -> int:
        n_t, n_h, n_w = self.grid
        return n_t * n_h * n_w


# --------------------------------------------------------------------------- positions


def positional_embedding(coords, dim: int, base: float = POS_BASE) -> np.ndarray:
    """Fixed separable sinusoidal embedding of ``(t, h, w)`` token coordinates.

    ``dim`` is split into three groups of ``2 * (dim // 6)`` entries, one per
    axis, each laid out as ``[sin(x w_0..w_{k-1}), cos(x w_0..w_{k-1})]`` with
    ``w_i = base ** (-i / k)``.  Trailing ``dim % 6`` entries stay zero.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    half = dim // 6
    out = np.zeros((coords.shape[0], dim))
    if half == 0:
        return out
    freqs = base ** (-np.arange(half) / half)
    for axis in range(3):
        ang = coords[:, axis:axis + 1] * freqs[None, :]
        start = axis * 2 * half
        out[:, start:start + half] = np.sin(ang)
        out[:, start + half:start + 2 * half] = np.cos(ang)
    return out


@functools.lru_cache(maxsize=32)
def _position_table(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    n_t, n_h, n_w = grid
    t, h, w = np.meshgrid(np.arange(n_t), np.arange(n_h), np.arange(n_w), indexing="ij")
    table = positional_embedding(np.stack([t.ravel(), h.ravel(), w.ravel()], 1), dim)
    table.setflags(write=False)
    return table


# --------------------------------------------------------------------------- parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name and shape of every parameter, in canonical order."""
    d, dd, c = cfg.embed_dim, cfg.dec_width, cfg.cube_dim
    shapes: dict[str, tuple] = {"embed.w": (c, d), "embed.b": (d,)}

    def attn(prefix, dim):
        for n in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{n}"] = (dim, dim)
            shapes[f"{prefix}.b{n}"] = (dim,)

    def norm(prefix, dim):
        shapes[f"{prefix}.g"] = (dim,)
        shapes[f"{prefix}.b"] = (dim,)

    def mlp(prefix, dim):
        hidden = cfg.mlp_ratio * dim
        shapes[f"{prefix}.w1"] = (dim, hidden)
        shapes[f"{prefix}.b1"] = (hidden,)
        shapes[f"{prefix}.w2"] = (hidden, dim)
        shapes[f"{prefix}.b2"] = (dim,)

    for i in range(cfg.enc_depth):
        norm(f"enc.{i}.ln1", d)
        attn(f"enc.{i}.attn", d)
        norm(f"enc.{i}.ln2", d)
        mlp(f"enc.{i}.mlp", d)
    norm("enc.norm", d)

    shapes["dec.proj.w"] = (d, dd)
    shapes["dec.proj.b"] = (dd,)
    shapes["dec.query"] = (dd,)
    for i in range(cfg.dec_depth):
        if cfg.decoder_self_attention:
            norm(f"dec.{i}.ln_self", dd)
            attn(f"dec.{i}.self", dd)
        norm(f"dec.{i}.ln_cross", dd)
        attn(f"dec.{i}.cross", dd)
        norm(f"dec.{i}.ln_mlp", dd)
        mlp(f"dec.{i}.mlp", dd)
    norm("dec.norm", dd)
    shapes["head.w"] = (dd, c)
    shapes["head.b"] = (c,)

    shapes["cls.w"] = (d, cfg.num_classes)
    shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    With ``D`` embed width, ``E`` decoder width, ``r`` mlp ratio, ``c`` cube_dim
    and ``K`` classes, a transformer block of width ``w`` holds
    ``4 w^2 + 4 w`` attention, ``2 r w^2 + r w + w`` MLP and ``4 w`` norm
    parameters (``6 w`` norm, ``8 w^2 + 8 w`` attention with decoder self-attention).
    """
    d, e, r, c, k = cfg.embed_dim, cfg.dec_width, cfg.mlp_ratio, cfg.cube_dim, cfg.num_classes

    def block(w, n_attn):
        return n_attn * (4 * w * w + 4 * w) + (2 * r * w * w + r * w + w) + (n_attn + 1) * 2 * w

    n_dec_attn = 2 if cfg.decoder_self_attention else 1
    return (c * d + d + cfg.enc_depth * block(d, 1) + 2 * d
            + d * e + e + e + cfg.dec_depth * block(e, n_dec_attn) + 2 * e + e * c + c
            + d * k + k)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm gains.

    The shared decoder query is drawn from an untruncated N(0, 0.02^2).
    """
    params = {}
    for i, (name, shape) in enumerate(param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[1]
        rng = streams.substream(seed, streams.INIT, i)
        if name == "dec.query":
            arr = 0.02 * rng.standard_normal(shape)
        elif name.split(".")[-2].startswith("ln") or name.split(".")[-2] == "norm":
            arr = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif leaf.startswith("w"):
            arr = _trunc_normal(rng, shape, 0.02)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return std * x


# --------------------------------------------------------------------------- network


@dataclass
class AttentionRecord:
    """Post-softmax attention maps, one ``(B, heads, Lq, Lk)`` array per layer."""

    layers: list

    def __len__(self):
        return len(self.layers)


class Net:
    """Parameters bound for one forward pass.

    Parameters listed in ``trainable`` (all of them by default) become tape
    leaves when a ``tape`` is given; everything else is a constant.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], tape: ad.Tape | None = None,
                 trainable=None):
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise ContractError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.tape = tape
        self.dtype = params["embed.w"].dtype
        self.p: dict[str, ad.Tensor] = {}
        for name in expected:
            if tape is not None and (trainable is None or name in trainable):
                self.p[name] = tape.leaf(params[name], name=name)
            else:
                self.p[name] = ad.const(params[name])

    # ---- building blocks

    def _linear(self, prefix: str, x: ad.Tensor, w="w", b="b") -> ad.Tensor:
        return ad.add(ad.matmul(x, self.p[f"{prefix}.{w}"]), self.p[f"{prefix}.{b}"])

    def _norm(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        return ad.layernorm(x, self.p[f"{prefix}.g"], self.p[f"{prefix}.b"], self.cfg.ln_eps)

    def _mlp(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        h = ad.gelu(self._linear(prefix, x, "w1", "b1"))
        return self._linear(prefix, h, "w2", "b2")

    def _attention(self, prefix: str, xq: ad.Tensor, xkv: ad.Tensor, mask: np.ndarray, records=None):
        b, lq, dim = xq.shape
        lk = xkv.shape[1]
        heads = self.cfg.dec_heads if prefix.startswith("dec.") else self.cfg.num_heads
        dh = dim // heads
        q = ad.transpose(ad.reshape(self._linear(prefix, xq, "wq", "bq"), (b, lq, heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self._linear(prefix, xkv, "wk", "bk"), (b, lk, heads, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(self._linear(prefix, xkv, "wv", "bv"), (b, lk, heads, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(dh))
        probs = ad.masked_softmax(scores, mask[:, None, :, :])
        if records is not None:
            records.append(probs.data.copy())
        out = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, lq, dim))
        return self._linear(prefix, out, "wo", "bo")

    def _positions(self, idx: np.ndarray, dim: int) -> np.ndarray:
        table = _position_table(tuple(self.cfg.grid), dim)
        pos = table[idx].astype(self.dtype)
        return pos if self.cfg.use_pos_embed else np.zeros_like(pos)

    # ---- encoder / decoder

    def encode(self, tokens, layout: BatchLayout, record: bool = False):
        """Embed the visible tokens of ``layout`` and run the block-causal encoder.

        ``tokens`` is a ``(B, N, cube_dim)`` array or tensor of all cube
        vectors; returns ``(outputs (B, L, D), AttentionRecord | None)``.
        """
        tokens = tokens if isinstance(tokens, ad.Tensor) else ad.const(np.asarray(tokens, dtype=self.dtype))
        if tokens.data.ndim != 3 or tokens.shape[-1] != self.cfg.cube_dim:
            raise ContractError(f"tokens must be (B, N, {self.cfg.cube_dim}), got {tokens.shape}")
        if tokens.shape[1] != self.cfg.num_tokens or tokens.shape[0] != layout.batch_size:
            raise ContractError(f"tokens {tokens.shape} do not match layout batch {layout.batch_size} "
                                f"and grid of {self.cfg.num_tokens} tokens")
        records = [] if record else None
        x = ad.gather_rows(tokens, layout.encoder_tokens)
        x = ad.add(self._linear("embed", x), self._positions(layout.encoder_tokens, self.cfg.embed_dim))
        mask = layout.enc_mask
        for i in range(self.cfg.enc_depth):
            h = self._norm(f"enc.{i}.ln1", x)
            x = ad.add(x, self._attention(f"enc.{i}.attn", h, h, mask, records))
            x = ad.add(x, self._mlp(f"enc.{i}.mlp", self._norm(f"enc.{i}.ln2", x)))
        x = self._norm("enc.norm", x)
        return x, (AttentionRecord(records) if record else None)

    def decode(self, enc_out: ad.Tensor, layout: BatchLayout, cross_mask: np.ndarray | None = None) -> ad.Tensor:
        """Predict one cube vector per decoder query of ``layout``.

        Queries are the shared learned vector plus the position of their target
        token.  They read encoder outputs through masked cross-attention and,
        only when enabled, attend to queries of the same or earlier clusters.
        """
        cross_mask = layout.cross_mask if cross_mask is None else cross_mask
        b, q_len = layout.decoder_tokens.shape
        if cross_mask.shape != (b, q_len, enc_out.shape[1]):
            raise ContractError(f"cross_mask shape {cross_mask.shape} does not match "
                                f"{(b, q_len, enc_out.shape[1])}")
        if not cross_mask.any(axis=-1).all():
            raise ContractError("cross_mask has a query row with no admissible key")
        kv = self._linear("dec.proj", enc_out)
        pos = self._positions(layout.decoder_tokens, self.cfg.dec_width)
        x = ad.add(self.p["dec.query"], pos)
        self_mask = layout.dec_self_mask if self.cfg.decoder_self_attention else None
        for i in range(self.cfg.dec_depth):
            if self_mask is not None:
                h = self._norm(f"dec.{i}.ln_self", x)
                x = ad.add(x, self._attention(f"dec.{i}.self", h, h, self_mask))
            x = ad.add(x, self._attention(f"dec.{i}.cross", self._norm(f"dec.{i}.ln_cross", x), kv, cross_mask))
            x = ad.add(x, self._mlp(f"dec.{i}.mlp", self._norm(f"dec.{i}.ln_mlp", x)))
        return self._linear("head", self._norm("dec.norm", x))

    def features(self, tokens, record: bool = False):
        """Mean-pooled encoder outputs with every token visible and full attention."""
        tokens = tokens if isinstance(tokens, ad.Tensor) else ad.const(np.asarray(tokens, dtype=self.dtype))
        layout = full_batch_layout(self.cfg.num_tokens, tokens.shape[0])
        out, rec = self.encode(tokens, layout, record)
        return ad.reduce_mean(out, axis=1), rec

    def classify(self, tokens) -> ad.Tensor:
        feats, _ = self.features(tokens)
        return self._linear("cls", feats)


# --------------------------------------------------------------------------- functional surface


def _as_batch(plan) -> BatchLayout:
    return BatchLayout.stack([plan]) if isinstance(plan, LayoutPlan) else plan


def _as_tokens(tokens) -> np.ndarray:
    if isinstance(tokens, TokenGrid):
        return tokens.cubes[None]
    arr = np.asarray(tokens)
    return arr[None] if arr.ndim == 2 else arr


def encode(plan, tokens, params, cfg: ModelConfig, record: bool = True):
    """Inference-mode encoder pass; returns ``(outputs, AttentionRecord)`` as arrays."""
    net = Net(cfg, params)
    out, rec = net.encode(_as_tokens(tokens).astype(net.dtype), _as_batch(plan), record)
    return out.data, rec


def decode_predict(enc_out, plan, params, cfg: ModelConfig) -> np.ndarray:
    net = Net(cfg, params)
    return net.decode(ad.const(np.asarray(enc_out, dtype=net.dtype)), _as_batch(plan)).data


def predict(plan, tokens, params, cfg: ModelConfig) -> np.ndarray:
    """Encoder then decoder; ``(B, Q, cube_dim)`` predicted cube vectors."""
    layout = _as_batch(plan)
    net = Net(cfg, params)
    out, _ = net.encode(_as_tokens(tokens).astype(net.dtype), layout)
    return net.decode(out, layout).data


def pretrain_loss(predictions, targets) -> ad.Tensor:
    """Mean squared error over all target tokens and cube dimensions."""
    if not isinstance(predictions, ad.Tensor):
        predictions = ad.const(np.asarray(predictions))
    return ad.mse(predictions, np.asarray(targets, dtype=predictions.dtype))


def gather_targets(normalized: np.ndarray, layout) -> np.ndarray:
    """Per-query target cube vectors ``(B, Q, cube_dim)`` from ``(B, N, cube_dim)`` targets."""
    layout = _as_batch(layout)
    normalized = _as_tokens(normalized)
    return normalized[np.arange(layout.batch_size)[:, None], layout.decoder_tokens]


def downstream_forward(tokens, params, cfg: ModelConfig) -> np.ndarray:
    """Class logits ``(B, num_classes)`` from the encoder alone."""
    net = Net(cfg, params)
    return net.classify(_as_tokens(tokens).astype(net.dtype)).data
