"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to tensors that belong to it.
:func:`backward` replays the tape in reverse, so gradient accumulation order
is fixed by recording order and results are bit-reproducible.

Only the handful of operations needed by the transformer in :mod:`arclust.model`
is provided.  Every forward result is checked for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable | None]] = []

    def leaf(self, data, requires_grad: bool = True, name: str | None = None) -> "Tensor":
        t = Tensor(np.asarray(data), self if requires_grad else None, name=name)
        if requires_grad:
            t.index = len(self.nodes)
            self.nodes.append((t, (), None))
        return t

    def _record(self, out: "Tensor", inputs: tuple, vjp: Callable) -> None:
        out.tape = self
        out.index = len(self.nodes)
        self.nodes.append((out, inputs, vjp))


class Tensor:
    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data: np.ndarray, tape: Tape | None = None, name: str | None = None):
        self.data = data
        self.tape = tape
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def const(data, dtype=None) -> Tensor:
    """Wrap an array as a tensor that never receives gradients."""
    return Tensor(np.asarray(data, dtype=dtype))


@dataclass
class Gradients:
    """Gradients of a scalar loss keyed by tape index; absent entries are zero."""

    by_index: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.by_index.get(t.index) if t.tape is not None else None
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is not None and t.index in self.by_index


# --------------------------------------------------------------------------- helpers


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finite(name: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"{name}: non-finite value in output of shape {out.shape}")
    return out


def _emit(name: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    _finite(name, out)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{name}: inputs recorded on different tapes")
            tape = t.tape
    result = Tensor(out)
    if tape is not None:
        tape._record(result, inputs, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ContractError(f"matmul: {exc}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _emit("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: {exc}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ContractError(f"transpose: {axes} is not a permutation of {a.data.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along the second-to-last axis.

    With a 2-D ``x`` of shape ``(N, C)``, ``idx`` may have any shape and the
    result is ``idx.shape + (C,)``.  With ``x`` of shape ``(B, N, C)``,
    ``idx`` must be ``(B, L)`` and rows are taken per batch element.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows: indices must be integers")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather_rows: index out of range for {n} rows")
    if x.data.ndim == 2:
        out = x.data[idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[-1]))
            return (gx,)
    elif x.data.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]:
        bidx = np.arange(x.shape[0])[:, None]
        out = x.data[bidx, idx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (np.broadcast_to(bidx, idx.shape), idx), g)
            return (gx,)
    else:
        raise ContractError(f"gather_rows: unsupported shapes x={x.shape}, idx={idx.shape}")
    return _emit("gather_rows", out, (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis))
    count = a.data.size // max(out.size, 1)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)

    return _emit("reduce_mean", out, (a,), vjp)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("reduce_sum", out, (a,), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"layernorm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _emit("layernorm", out, (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation ``0.5 x (1 + tanh(c (x + a x^3)))`` with c = sqrt(2/pi), a = 0.044715."""
    z = x.data
    c, a = z.dtype.type(GELU_C), z.dtype.type(GELU_A)
    th = np.tanh(c * (z + a * z**3))
    out = 0.5 * z * (1.0 + th)

    def vjp(g):
        dth = (1.0 - th * th) * c * (1.0 + 3.0 * a * z * z)
        return (g * (0.5 * (1.0 + th) + 0.5 * z * dth),)

    return _emit("gelu", out, (x,), vjp)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis where ``mask`` is False gives probability exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, scores.shape)
    except ValueError:
        raise ContractError(f"masked_softmax: mask {mask.shape} does not broadcast to {scores.shape}") from None
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a row of the mask has no admissible entry")
    s = np.where(full, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", p, (scores,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ContractError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    k = pred.dtype.type(2.0 / max(diff.size, 1))

    def vjp(g):
        gd = g * k * diff
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return _emit("mse", out, (pred, target), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``) rows."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(labels))
    out = np.asarray(-logp[rows, labels].mean())

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / logits.dtype.type(len(labels)),)

    return _emit("cross_entropy", out, (logits,), vjp)


# --------------------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep from scalar ``loss``; returns gradients of every recorded tensor."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    for i in range(loss.index, -1, -1):
        node, inputs, vjp = tape.nodes[i]
        if vjp is None:
            continue
        g = grads.pop(i, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or inp.tape is None:
                continue
            prev = grads.get(inp.index)
            grads[inp.index] = gi if prev is None else prev + gi
    return Gradients(grads)


# --------------------------------------------------------------------------- checking


@dataclass
class FiniteDiffReport:
    max_rel_err: dict[str, float]
    tol: float
    checked: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(f: Callable[[dict], float], params: dict[str, np.ndarray],
                      analytic: dict[str, np.ndarray], h: float = 1e-5, tol: float = 1e-6,
                      picks: list[tuple[str, tuple]] | None = None) -> FiniteDiffReport:
    """Compare analytic gradients with central differences ``(f(p+h) - f(p-h)) / 2h``.

    ``picks`` lists ``(param_name, element_index)`` pairs to probe; by default
    every element of every parameter is checked.  ``params`` arrays are
    perturbed in place and restored.
    """
    if picks is None:
        picks = [(k, tuple(int(i) for i in ix)) for k, v in params.items() for ix in np.ndindex(v.shape)]
    errs: dict[str, float] = {}
    for name, ix in picks:
        arr = params[name]
        old = arr[ix]
        arr[ix] = old + h
        fp = float(f(params))
        arr[ix] = old - h
        fm = float(f(params))
        arr[ix] = old
        num = (fp - fm) / (2 * h)
        err = relative_error(float(analytic[name][ix]), num)
        errs[name] = max(errs.get(name, 0.0), err)
    return FiniteDiffReport(errs, tol, len(picks))
