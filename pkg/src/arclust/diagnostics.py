"""Numerical rank of attention maps, layer by layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: ``n - 1`` rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(p), max(p)) for p in pairs if -1 not in p]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs], dtype=np.intp),
                           np.array([p[1] for p in pairs], dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_singular_values(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of ``a`` in descending order by one-sided (Hestenes) Jacobi.

    Pairs of columns are rotated until every pair is orthogonal to ``tol``
    relative to their norms; the column norms are then the singular values.
    Each sweep walks a fixed tournament schedule, rotating disjoint pairs
    together, so results are deterministic.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("non-finite entry in matrix passed to SVD")
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    schedule = _round_robin(a.shape[1])
    # columns at roundoff level are treated as zero and never rotated
    floor = (np.finfo(np.float64).eps ** 2) * float((a * a).sum())
    for _ in range(max_sweeps):
        rotated = False
        for i, j in schedule:
            x, y = a[:, i], a[:, j]
            alpha = (x * x).sum(0)
            beta = (y * y).sum(0)
            gamma = (x * y).sum(0)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, i], a[:, j] = c * x - s * y, s * x + c * y
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    return np.sort(np.linalg.norm(a, axis=0))[::-1]


def default_rel_tol(shape, dtype=np.float64) -> float:
    return max(shape) * float(np.finfo(dtype).eps)


def numerical_rank(a: np.ndarray, rel_tol: float | None = None) -> int:
    """Count of singular values above ``rel_tol * sigma_max``.

    The default tolerance is ``max(m, n) * eps`` of the input's dtype.
    """
    a = np.asarray(a)
    if rel_tol is None:
        rel_tol = default_rel_tol(a.shape, a.dtype if a.dtype.kind == "f" else np.float64)
    sv = jacobi_singular_values(a)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int((sv > rel_tol * sv[0]).sum())


@dataclass(frozen=True)
class RankReport:
    layer_ranks: list[float]  # mean over heads and samples
    sizes: list[tuple[int, int]]  # (rows, cols) of each layer's maps

    def csv(self) -> str:
        lines = ["layer,mean_rank,rows,cols"]
        lines += [f"{i},{r:.6f},{m},{n}" for i, (r, (m, n)) in enumerate(zip(self.layer_ranks, self.sizes))]
        return "\n".join(lines) + "\n"


def attention_rank_report(records, rel_tol: float | None = None) -> RankReport:
    """Mean numerical rank per layer of recorded ``(B, heads, Lq, Lk)`` attention maps.

    ``records`` is an ``AttentionRecord`` or a plain list of per-layer arrays.
    """
    layers = getattr(records, "layers", records)
    if not layers:
        raise ValueError("no attention maps recorded")
    ranks, sizes = [], []
    for maps in layers:
        maps = np.asarray(maps)
        if not np.isfinite(maps).all():
            raise NumericError("non-finite attention map")
        flat = maps.reshape(-1, *maps.shape[-2:])
        ranks.append(float(np.mean([numerical_rank(m, rel_tol) for m in flat])))
        sizes.append(tuple(maps.shape[-2:]))
    return RankReport(ranks, sizes)
