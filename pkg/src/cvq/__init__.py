"""Channel-wise vector quantization (CVQ) and next-channel autoregressive
generation (CAR), with a patch-wise VQ baseline, at desk scale.

Everything runs on float64 numpy with a small reverse-mode autodiff tape.
Hot inner loops (nearest-codeword search, codebook gradient scatter) are
numba-jitted with a pure-numpy fallback, selected by the CVQ_NUMBA env var.
"""

import os

# CVQ_THREADS caps intra-op parallelism (BLAS, numba). The env vars only
# take effect if they are set before numpy is first imported, which is why
# this block sits at the top of the package __init__.
_threads = os.environ.get("CVQ_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "NUMBA_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)

from cvq.errors import (  # noqa: E402
    CvqError,
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    TapeError,
)
from cvq.tensor import GradTape, Tensor  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CvqError",
    "ConfigError",
    "DataError",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "GradTape",
    "Tensor",
]
