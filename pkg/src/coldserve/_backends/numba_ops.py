"""Jit-compiled kernels, the default backend.

Plain loops under @njit with the inner dimension innermost. fastmath stays
off: the strict IEEE ordering is what lets the NumPy fallback, the fused /
unfused comparison and the batch-composition-independence tests all hold
bit-for-bit.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def matmul(a, b):
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=np.float32)
    for i in range(rows):
        for j in range(cols):
            acc = np.float32(0.0)
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def matvec(a, x):
    rows, cols = a.shape
    y = np.zeros(rows, dtype=np.float32)
    for i in range(rows):
        acc = np.float32(0.0)
        for c in range(cols):
            acc += a[i, c] * x[c]
        y[i] = acc
    return y


@njit(cache=True)
def bgmv_shrink(x, a_stack, ranks, idx):
    batch, d_in = x.shape
    r_max = a_stack.shape[2]
    out = np.zeros((batch, r_max), dtype=np.float32)
    for i in range(batch):
        ai = idx[i]
        if ai < 0:
            continue
        r = ranks[ai]
        for j in range(r):
            acc = np.float32(0.0)
            for k in range(d_in):
                acc += x[i, k] * a_stack[ai, k, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def bgmv_expand_fused(v, b_stack, ranks, scalings, idx, y):
    batch = v.shape[0]
    d_out = b_stack.shape[2]
    out = y.copy()
    for i in range(batch):
        ai = idx[i]
        if ai < 0:
            continue
        r = ranks[ai]
        s = scalings[ai]
        for c in range(d_out):
            acc = np.float32(0.0)
            for k in range(r):
                acc += v[i, k] * b_stack[ai, k, c]
            out[i, c] = y[i, c] + s * acc
    return out
