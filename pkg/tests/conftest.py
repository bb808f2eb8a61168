"""Pin thread counts before anything imports numpy/numba so every numeric
path is bit-reproducible run to run."""

import os

os.environ.setdefault("CVQ_THREADS", "1")
