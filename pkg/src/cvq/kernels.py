"""Backend dispatch for the hot kernels.

CVQ_NUMBA selects the implementation:
  unset / "auto"  use numba if importable, else fall back to numpy
  "1"             require numba (ImportError if unavailable)
  "0"             force the pure-numpy path

Both backends are bitwise-identical by construction; see
benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os

from cvq.errors import ConfigError

_mode = os.environ.get("CVQ_NUMBA", "auto").lower()

if _mode in ("0", "false", "off"):
    from cvq import _kernels_numpy as _impl

    BACKEND = "numpy"
elif _mode in ("1", "true", "on"):
    from cvq import _kernels_numba as _impl

    BACKEND = "numba"
elif _mode == "auto" or _mode == "":
    try:
        from cvq import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:
        from cvq import _kernels_numpy as _impl

        BACKEND = "numpy"
else:
    raise ConfigError(f"CVQ_NUMBA={_mode!r} not understood (use 0, 1, or auto)")

sqdist_matrix = _impl.sqdist_matrix
nearest_codeword = _impl.nearest_codeword
scatter_add_rows = _impl.scatter_add_rows
