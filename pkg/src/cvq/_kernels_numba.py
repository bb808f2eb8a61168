"""Numba-jitted kernel implementations (the default hot path).

Plain sequential loops, no fastmath and no prange: results must be bitwise
identical to the numpy fallback and independent of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sqdist_matrix(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    t, d = vectors.shape
    n = entries.shape[0]
    out = np.zeros((t, n))
    for i in range(t):
        for j in range(n):
            s = 0.0
            for k in range(d):
                diff = vectors[i, k] - entries[j, k]
                s += diff * diff
            out[i, j] = s
    return out


@njit(cache=True)
def nearest_codeword(vectors: np.ndarray, entries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t, d = vectors.shape
    n = entries.shape[0]
    idx = np.zeros(t, dtype=np.int64)
    best = np.zeros(t)
    for i in range(t):
        best_d = np.inf
        best_j = 0
        for j in range(n):
            s = 0.0
            for k in range(d):
                diff = vectors[i, k] - entries[j, k]
                s += diff * diff
            if s < best_d:
                best_d = s
                best_j = j
        idx[i] = best_j
        best[i] = best_d
    return idx, best


@njit(cache=True)
def scatter_add_rows(out: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    for t in range(indices.shape[0]):
        row = indices[t]
        for k in range(values.shape[1]):
            out[row, k] += values[t, k]
