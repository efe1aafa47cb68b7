"""Pure-NumPy kernels, the fallback backend.

Every kernel accumulates along the inner dimension in ascending order, one
slice at a time, so results are bit-identical to the jit backend running the
same loops scalar by scalar. np.matmul/np.dot are deliberately avoided here:
BLAS reorders accumulation, which would make a row's value depend on the
batch it happens to sit in.
"""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    """Row-major product of two f32 matrices, inner dimension accumulated in order."""
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=np.float32)
    for k in range(inner):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matvec(a, x):
    """y[r] = sum_c a[r,c] * x[c], c accumulated in ascending order."""
    rows, cols = a.shape
    y = np.zeros(rows, dtype=np.float32)
    for c in range(cols):
        y += a[:, c] * x[c]
    return y


def bgmv_shrink(x, a_stack, ranks, idx):
    """Per-row LoRA down-projection into a (batch, r_max) zero-padded buffer.

    Row i with idx[i] == -1 stays all-zero; otherwise columns [0, rank) hold
    x[i] @ A[idx[i]] and the padding columns stay zero.
    """
    batch, d_in = x.shape
    r_max = a_stack.shape[2]
    out = np.zeros((batch, r_max), dtype=np.float32)
    for i in range(batch):
        ai = idx[i]
        if ai < 0:
            continue
        r = int(ranks[ai])
        a = a_stack[ai]
        acc = np.zeros(r, dtype=np.float32)
        for k in range(d_in):
            acc += x[i, k] * a[k, :r]
        out[i, :r] = acc
    return out


def bgmv_expand_fused(v, b_stack, ranks, scalings, idx, y):
    """Per-row LoRA up-projection with the residual add fused in.

    Row i becomes y[i] + scaling * (v[i, :rank] @ B[idx[i]]); rows with
    idx[i] == -1 are a bitwise copy of y. Only the first `rank` columns of v
    are ever read, so poisoned padding cannot leak through.
    """
    batch = v.shape[0]
    d_out = b_stack.shape[2]
    out = y.copy()
    for i in range(batch):
        ai = idx[i]
        if ai < 0:
            continue
        r = int(ranks[ai])
        b = b_stack[ai]
        acc = np.zeros(d_out, dtype=np.float32)
        for k in range(r):
            acc += v[i, k] * b[k]
        out[i] = y[i] + scalings[ai] * acc
    return out
