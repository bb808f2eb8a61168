"""Pure-numpy kernel implementations (the fallback path).

Accumulation order matches the numba kernels element for element: squared
distances accumulate sequentially over the feature dimension, and row
scatter-adds apply in token order, so both backends produce bitwise
identical results.
"""

from __future__ import annotations

import numpy as np


def sqdist_matrix(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Squared euclidean distances, naive (v - e)**2 expansion; [T, N]."""
    t = vectors.shape[0]
    n = entries.shape[0]
    out = np.zeros((t, n))
    for k in range(vectors.shape[1]):
        diff = vectors[:, k, None] - entries[None, :, k]
        out += diff * diff
    return out


def nearest_codeword(vectors: np.ndarray, entries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmin codeword per vector; ties break to the lowest index."""
    dist = sqdist_matrix(vectors, entries)
    idx = np.argmin(dist, axis=1).astype(np.int64)
    return idx, dist[np.arange(vectors.shape[0]), idx]


def scatter_add_rows(out: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    """out[indices[t]] += values[t], applied in token order, in place."""
    np.add.at(out, indices, values)
