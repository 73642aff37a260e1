# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels; same contract as _kernels_np."""

import numpy as np

cimport cython
from libc.math cimport sqrt, tanh

BACKEND = "compiled"

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    cdef double xv, t
    out = np.empty((n, h), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    for i in range(n):
        for j in range(h):
            xv = x[i, j]
            t = tanh(GELU_C * (xv + GELU_A * xv * xv * xv))
            y[i, j] = <real> (0.5 * xv * (1.0 + t))
    return out


def gelu_bwd(real[:, ::1] x, real[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    cdef double xv, t, sech2, inner_d
    out = np.empty((n, h), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] dx = out
    for i in range(n):
        for j in range(h):
            xv = x[i, j]
            t = tanh(GELU_C * (xv + GELU_A * xv * xv * xv))
            sech2 = 1.0 - t * t
            inner_d = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv)
            dx[i, j] = <real> (dy[i, j] * (0.5 * (1.0 + t) + 0.5 * xv * sech2 * inner_d))
    return out


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    cdef double m, v, r, d
    dt = np.asarray(x).dtype
    out = np.empty((n, h), dtype=dt)
    mean_out = np.empty(n, dtype=dt)
    rstd_out = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[::1] mean = mean_out, rstd = rstd_out
    for i in range(n):
        m = 0.0
        for j in range(h):
            m += x[i, j]
        m /= h
        v = 0.0
        for j in range(h):
            d = x[i, j] - m
            v += d * d
        v /= h
        r = 1.0 / sqrt(v + eps)
        mean[i] = <real> m
        rstd[i] = <real> r
        for j in range(h):
            y[i, j] = <real> (gamma[j] * ((x[i, j] - m) * r) + beta[j])
    return out, mean_out, rstd_out


def layernorm_bwd(real[:, ::1] x, real[::1] gamma, real[::1] mean,
                  real[::1] rstd, real[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    cdef double m1, m2, xh, dxh
    dt = np.asarray(x).dtype
    dx_out = np.empty((n, h), dtype=dt)
    dg_out = np.zeros(h, dtype=dt)
    db_out = np.zeros(h, dtype=dt)
    cdef real[:, ::1] dx = dx_out
    cdef real[::1] dg = dg_out, db = db_out
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(h):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xh
        m1 /= h
        m2 /= h
        for j in range(h):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = <real> (rstd[i] * (dxh - m1 - xh * m2))
            dg[j] += <real> (dy[i, j] * xh)
            db[j] += dy[i, j]
    return dx_out, dg_out, db_out


def normalize_rows_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    cdef double s
    dt = np.asarray(x).dtype
    out = np.empty((n, h), dtype=dt)
    norms_out = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[::1] norms = norms_out
    for i in range(n):
        s = 0.0
        for j in range(h):
            s += x[i, j] * x[i, j]
        s = sqrt(s)
        norms[i] = <real> s
        for j in range(h):
            y[i, j] = <real> (x[i, j] / s)
    return out, norms_out


def normalize_rows_bwd(real[:, ::1] y, real[::1] norms, real[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], h = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, h), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = out
    for i in range(n):
        dot = 0.0
        for j in range(h):
            dot += dy[i, j] * y[i, j]
        for j in range(h):
            dx[i, j] = <real> ((dy[i, j] - dot * y[i, j]) / norms[i])
    return out


def adamw_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double wd, double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <real> mi
        v[i] = <real> vi
        p[i] = <real> (p[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
        if wd != 0.0:
            p[i] = <real> (p[i] - lr * wd * p[i])
