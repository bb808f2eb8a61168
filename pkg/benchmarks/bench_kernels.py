"""Benchmark the numba kernels against the pure-numpy fallback.

Runs both backends on identical inputs, times them, and checks bitwise
agreement (indices and distances must match exactly, not approximately —
both backends accumulate in the same k-order on purpose).

Usage: python3 benchmarks/bench_kernels.py [--reps 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cvq import _kernels_numba as nb
from cvq import _kernels_numpy as npk


def _time(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=20, help="timing repetitions (best-of)")
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    cases = [
        ("patch tokens,  N=512", rng.normal(size=(512, 16)), rng.normal(size=(512, 16))),
        ("channel tokens, N=512", rng.normal(size=(512, 16)), rng.normal(size=(512, 16))),
        ("large batch,   N=1024", rng.normal(size=(2048, 16)), rng.normal(size=(1024, 16))),
        ("wide tokens,   N=256", rng.normal(size=(512, 64)), rng.normal(size=(256, 64))),
    ]

    # trigger JIT compilation outside the timed region
    nb.nearest_codeword(cases[0][1][:4], cases[0][2][:4])
    nb.sqdist_matrix(cases[0][1][:4], cases[0][2][:4])
    out = np.zeros((4, 4))
    nb.scatter_add_rows(out, np.zeros(2, dtype=np.int64), np.ones((2, 4)))

    print(f"{'case':24s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}  bitwise")
    for name, vectors, entries in cases:
        t_np = _time(lambda: npk.nearest_codeword(vectors, entries), args.reps)
        t_nb = _time(lambda: nb.nearest_codeword(vectors, entries), args.reps)
        idx_np, dist_np = npk.nearest_codeword(vectors, entries)
        idx_nb, dist_nb = nb.nearest_codeword(vectors, entries)
        same = np.array_equal(idx_np, idx_nb) and np.array_equal(dist_np, dist_nb)
        print(f"{name:24s} {t_np * 1e3:8.3f}ms {t_nb * 1e3:8.3f}ms {t_np / t_nb:7.1f}x  {same}")

    grad = rng.normal(size=(4096, 16))
    idx = rng.integers(0, 512, size=4096)
    out_np = np.zeros((512, 16))
    out_nb = np.zeros((512, 16))
    t_np = _time(lambda: npk.scatter_add_rows(np.zeros((512, 16)), idx, grad), args.reps)
    t_nb = _time(lambda: nb.scatter_add_rows(np.zeros((512, 16)), idx, grad), args.reps)
    npk.scatter_add_rows(out_np, idx, grad)
    nb.scatter_add_rows(out_nb, idx, grad)
    same = np.array_equal(out_np, out_nb)
    print(f"{'scatter-add 4096x16':24s} {t_np * 1e3:8.3f}ms {t_nb * 1e3:8.3f}ms {t_np / t_nb:7.1f}x  {same}")


if __name__ == "__main__":
    main()
