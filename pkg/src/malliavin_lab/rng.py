"""Counter-based Gaussian increments.

Path ``i`` of a run with seed ``s`` draws from a Philox4x64 stream keyed by
``(s, i)``; the ``k``-th 64-bit output belongs to step ``k``.  Its top 53
bits give a uniform ``u = (m + 1/2) / 2**53`` in (0, 1), mapped to a
standard normal by the inverse normal CDF (``scipy.special.ndtri``).  The
increments of a path therefore depend only on (seed, path, step), never on
how paths are split among workers.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


def uniforms(seed: int, path: int, steps: int) -> np.ndarray:
    key = np.array([seed & _MASK64, path & _MASK64], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(steps)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def standard_normals(seed: int, paths, steps: int) -> np.ndarray:
    """Array of shape (len(paths), steps)."""
    paths = np.asarray(paths, dtype=np.int64)
    out = np.empty((paths.size, steps))
    for row, p in enumerate(paths):
        out[row] = uniforms(seed, int(p), steps)
    return ndtri(out)


def brownian_increments(seed: int, paths, steps: int, dt: float) -> np.ndarray:
    return np.sqrt(dt) * standard_normals(seed, paths, steps)
