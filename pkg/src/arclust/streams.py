"""Seeded random substreams.

Every random draw in the package comes from a generator keyed by
``(seed, purpose, *coords)``.  Keys are hashed by :class:`numpy.random.SeedSequence`
so two different coordinate tuples never share a stream, and a stream can be
recreated at any time without replaying earlier draws.  This is what makes
resumed training runs bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import numpy as np

# purpose tags, first element of every spawn key
DATA = 0
BATCH = 1
ORDER = 2
MASK = 3
INIT = 4
PROBE = 5
CHECK = 6


def substream(seed: int, purpose: int, *coords: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, purpose, *coords)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (int(purpose),) + tuple(int(c) for c in coords)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def fisher_yates(n: int, rng: np.random.Generator, k: int | None = None) -> np.ndarray:
    """Uniform random permutation of ``range(n)``; with ``k`` only the first k slots are drawn.

    Slot ``i`` swaps with a uniformly chosen slot in ``[i, n)``, so the
    first ``k`` entries of a partial shuffle are a uniform ``k``-subset in
    uniform order.
    """
    k = n if k is None else k
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    perm = np.arange(n)
    if k == 0:
        return perm[:0]
    # draw all swap targets at once: j_i uniform in [i, n)
    offsets = rng.integers(0, n - np.arange(min(k, n - 1)))
    for i, off in enumerate(offsets):
        j = i + int(off)
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]
