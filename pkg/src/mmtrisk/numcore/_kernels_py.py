"""Pure NumPy versions of the row-wise kernels.

Every function here has a twin in ``_kernels_c.pyx`` with the same signature
and the same results up to floating point reassociation.
"""

import numpy as np


def softmax_rows_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    dxhat = g * gain
    n = xhat.shape[1]
    dx = rstd[:, None] * (
        dxhat
        - dxhat.sum(axis=1, keepdims=True) / n
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / n
    )
    return dx, dgain, dbias


def average_ranks(values):
    """1-based ranks with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks
