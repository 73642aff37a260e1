"""Pure-NumPy implementations of the hot elementwise kernels.

Reference semantics for the compiled core in _kernels.pyx: both backends
implement the same formulas, and duala.kernels picks one at import time.
Shapes: x is (n, h) row-major for the normalization kernels; the optimizer
kernel accepts any shape. All kernels preserve the input dtype (float32 or
float64).
"""

import numpy as np

BACKEND = "fallback"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x, dy):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    sech2 = 1.0 - t * t
    inner_d = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * inner_d)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return gamma * xhat + beta, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1)
    m2 = (dxhat * xhat).mean(axis=1)
    dx = rstd[:, None] * (dxhat - m1[:, None] - xhat * m2[:, None])
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def normalize_rows_fwd(x):
    norms = np.sqrt((x * x).sum(axis=1))
    return x / norms[:, None], norms


def normalize_rows_bwd(y, norms, dy):
    # y are the already-normalized rows
    dot = (dy * y).sum(axis=1)
    return (dy - dot[:, None] * y) / norms[:, None]


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """In-place AdamW step. bc1/bc2 are the bias corrections 1 - beta^t."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if wd != 0.0:
        p -= lr * wd * p
