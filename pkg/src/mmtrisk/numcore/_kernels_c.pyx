# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Same contracts as ``_kernels_py``."""

import numpy as np
from libc.math cimport exp, sqrt


def softmax_rows_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] /= s
    return out


def softmax_rows_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mu, var, r, d
    out = np.empty((n, m), dtype=np.float64)
    xhat_arr = np.empty((n, m), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rs[i] = r
        for j in range(m):
            xh[i, j] = (x[i, j] - mu) * r
            y[i, j] = xh[i, j] * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_bwd(double[:, ::1] g, double[:, ::1] xhat, double[::1] rstd, double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    cdef double s1, s2, dxh
    dx_arr = np.empty((n, m), dtype=np.float64)
    dgain_arr = np.zeros(m, dtype=np.float64)
    dbias_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
            dxh = g[i, j] * gain[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
        s1 /= m
        s2 /= m
        for j in range(m):
            dx[i, j] = rstd[i] * (g[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return dx_arr, dgain_arr, dbias_arr


def average_ranks(double[::1] values):
    cdef Py_ssize_t n = values.shape[0], i, j, k
    cdef double r
    order_arr = np.argsort(values, kind="mergesort")
    cdef long[::1] order = order_arr.astype(np.int64)
    ranks_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ranks = ranks_arr
    i = 0
    while i < n:
        j = i + 1
        while j < n and values[order[j]] == values[order[i]]:
            j += 1
        r = (i + j + 1) / 2.0
        for k in range(i, j):
            ranks[order[k]] = r
        i = j
    return ranks_arr
