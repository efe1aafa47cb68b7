"""Kernel backend selection.

Set COLDSERVE_BACKEND=numpy to force the pure-NumPy kernels, or
COLDSERVE_BACKEND=numba to require the jit backend (raising if numba is not
installed). Unset, the jit backend is used when importable and the NumPy
fallback otherwise. The two backends accumulate in the same order and agree
bit-for-bit; see benchmarks/compare_backends.py for the speed difference.
"""

import os

from coldserve._backends import numpy_ops

_ENV_VAR = "COLDSERVE_BACKEND"


def _select():
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested == "numpy":
        return numpy_ops
    if requested == "numba":
        from coldserve._backends import numba_ops

        return numba_ops
    if requested:
        raise RuntimeError(
            f"unknown {_ENV_VAR}={requested!r}; expected 'numba' or 'numpy'"
        )
    try:
        from coldserve._backends import numba_ops

        return numba_ops
    except ImportError:
        return numpy_ops


ops = _select()
BACKEND = ops.NAME


def warmup():
    """Trigger jit compilation on tiny inputs so timed runs exclude it."""
    import numpy as np

    a = np.ones((2, 2), dtype=np.float32)
    x = np.ones(2, dtype=np.float32)
    stack_a = np.ones((1, 2, 2), dtype=np.float32)
    stack_b = np.ones((1, 2, 2), dtype=np.float32)
    ranks = np.array([2], dtype=np.int64)
    scalings = np.array([1.0], dtype=np.float32)
    idx = np.array([0, 0], dtype=np.int64)  # one entry per batch row
    ops.matmul(a, a)
    ops.matvec(a, x)
    v = ops.bgmv_shrink(a, stack_a, ranks, idx)
    ops.bgmv_expand_fused(v, stack_b, ranks, scalings, idx, a)
