"""Dense numeric substrate: f32 matrices, ordered reductions, deterministic PRNG.

A "matrix" throughout the package is a C-contiguous 2-D float32 ndarray; its
flat buffer is the row-major data and its shape carries (rows, cols). Score
vectors are 1-D and may contain -inf sentinels; matrices must stay finite.

All reductions run with a fixed accumulation order (inner dimension innermost,
ascending), so a row's result never depends on which batch it was computed in
and fused/unfused kernel comparisons can use tight tolerances.
"""

from __future__ import annotations

import math

import numpy as np

from coldserve._backends import ops
from coldserve.errors import DimensionError, EmptySupportError

__all__ = [
    "as_matrix",
    "matmul",
    "matvec",
    "argmax_tiebreak_low",
    "log_softmax",
    "Prng",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def as_matrix(a) -> np.ndarray:
    """Coerce input to a C-contiguous 2-D float32 array."""
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with f32 accumulation in fixed order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not chain")
    return ops.matmul(a, b)


def matvec(a, x) -> np.ndarray:
    """y[r] = sum_c a[r,c] * x[c]; bitwise-equal to matmul with a 1-column matrix."""
    a = as_matrix(a)
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got ndim={x.ndim}")
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec shapes {a.shape} x ({x.shape[0]},) do not chain")
    return ops.matvec(a, x)


def argmax_tiebreak_low(s) -> int:
    """Index of the maximum score; exact ties go to the lowest index.

    Raises EmptySupportError when every entry is -inf.
    """
    v = np.asarray(s, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("scores must be a non-empty vector")
    if not np.any(v > -np.inf):
        raise EmptySupportError("all scores are -inf")
    return int(np.argmax(v))


def log_softmax(s) -> np.ndarray:
    """Numerically stable log-softmax; -inf entries stay -inf.

    Computed in float64 so exp of the output sums to 1 within 1e-6 even for
    long vectors. Raises EmptySupportError when no entry is finite.
    """
    v = np.asarray(s, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("scores must be a non-empty vector")
    finite = v > -np.inf
    if not np.any(finite):
        raise EmptySupportError("all scores are -inf")
    m = np.max(v[finite])
    shifted = v - m
    # exp(-inf) = 0 exactly, so sentinel entries drop out of the sum.
    total = np.sum(np.exp(shifted[finite]))
    out = shifted - np.log(total)
    out[~finite] = -np.inf
    return out


class Prng:
    """splitmix64 stream: state += golden gamma, then two xor-shift-multiply mixes.

    Bit-for-bit portable; one instance per owner, never shared across threads.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_unit_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of the stream."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, n: int, scale: float = 1.0) -> np.ndarray:
        """n floats uniform in (-scale, scale), float32, identical to calling
        next_unit_float n times and mapping each through 2u-1.

        Vectorized: after n draws the scalar state would be state + n*gamma,
        and each draw mixes state + k*gamma independently.
        """
        if n == 0:
            return np.zeros(0, dtype=np.float32)
        base = np.uint64(self.state)
        steps = (np.arange(1, n + 1, dtype=np.uint64)) * np.uint64(_GAMMA)
        z = base + steps
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        unit = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return ((2.0 * unit - 1.0) * scale).astype(np.float32)

    def next_int(self, upper: int) -> int:
        """Uniform integer in [0, upper)."""
        return int(math.floor(self.next_unit_float() * upper))
