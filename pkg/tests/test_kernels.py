"""Elementwise kernels: formula oracles and compiled/fallback agreement."""

import numpy as np
import pytest

from duala import _kernels_np, kernels

try:
    from duala import _kernels
except ImportError:
    _kernels = None

BACKENDS = [_kernels_np] + ([_kernels] if _kernels is not None else [])


def data(dtype=np.float64, n=7, h=11, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, h)).astype(dtype)
    dy = rng.standard_normal((n, h)).astype(dtype)
    gamma = rng.standard_normal(h).astype(dtype)
    beta = rng.standard_normal(h).astype(dtype)
    return x, dy, gamma, beta


def central_diff(f, x, eps=1e-6):
    out = np.empty_like(x)
    flat = x.ravel()
    o = out.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f(x)
        flat[i] = keep - eps
        down = f(x)
        flat[i] = keep
        o[i] = (up - down) / (2 * eps)
    return out


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_gelu_formula(mod):
    x, _, _, _ = data()
    got = mod.gelu_fwd(x)
    c = np.sqrt(2.0 / np.pi)
    want = 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert got.dtype == x.dtype


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_gelu_backward_finite_difference(mod):
    x, dy, _, _ = data(n=3, h=4)
    got = mod.gelu_bwd(x, dy)
    fd = central_diff(lambda xv: float(np.sum(mod.gelu_fwd(xv) * dy)), x)
    np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_layernorm_normalizes(mod):
    x, _, gamma, beta = data()
    y, mean, rstd = mod.layernorm_fwd(x, np.ones_like(gamma),
                                      np.zeros_like(beta), 1e-5)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-3)
    np.testing.assert_allclose(mean, x.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(rstd, 1.0 / np.sqrt(x.var(axis=1) + 1e-5),
                               rtol=1e-12)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_layernorm_affine(mod):
    x, _, gamma, beta = data()
    y, mean, rstd = mod.layernorm_fwd(x, gamma, beta, 1e-5)
    xhat = (x - mean[:, None]) * rstd[:, None]
    np.testing.assert_allclose(y, gamma * xhat + beta, rtol=1e-12)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_layernorm_backward_finite_difference(mod):
    x, dy, gamma, beta = data(n=3, h=5)
    _, mean, rstd = mod.layernorm_fwd(x, gamma, beta, 1e-5)
    dx, dgamma, dbeta = mod.layernorm_bwd(x, gamma, mean, rstd, dy)

    def value(xv):
        y, _, _ = mod.layernorm_fwd(xv, gamma, beta, 1e-5)
        return float(np.sum(y * dy))

    np.testing.assert_allclose(dx, central_diff(value, x),
                               rtol=1e-5, atol=1e-7)

    def value_g(gv):
        y, _, _ = mod.layernorm_fwd(x, gv, beta, 1e-5)
        return float(np.sum(y * dy))

    np.testing.assert_allclose(dgamma, central_diff(value_g, gamma.copy()),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dbeta, dy.sum(axis=0), rtol=1e-12)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_normalize_rows(mod):
    x, dy, _, _ = data()
    y, norms = mod.normalize_rows_fwd(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(norms, np.linalg.norm(x, axis=1), rtol=1e-12)
    dx = mod.normalize_rows_bwd(y, norms, dy)
    fd = central_diff(
        lambda xv: float(np.sum(mod.normalize_rows_fwd(xv)[0] * dy)), x)
    np.testing.assert_allclose(dx, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_adamw_kernel_matches_scalar_loop(mod):
    rng = np.random.default_rng(4)
    p = rng.standard_normal(6)
    g = rng.standard_normal(6)
    m = rng.standard_normal(6) * 0.1
    v = np.abs(rng.standard_normal(6)) * 0.1
    want_p = p.copy()
    want_m = m.copy()
    want_v = v.copy()
    lr, b1, b2, eps, wd, bc1, bc2 = 0.01, 0.9, 0.999, 1e-8, 0.02, 0.1, 0.002
    for i in range(6):
        want_m[i] = b1 * want_m[i] + (1 - b1) * g[i]
        want_v[i] = b2 * want_v[i] + (1 - b2) * g[i] * g[i]
        want_p[i] -= lr * (want_m[i] / bc1) / (np.sqrt(want_v[i] / bc2) + eps)
        want_p[i] -= lr * wd * want_p[i]
    mod.adamw_update(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2)
    np.testing.assert_allclose(p, want_p, rtol=1e-12)
    np.testing.assert_allclose(m, want_m, rtol=1e-12)
    np.testing.assert_allclose(v, want_v, rtol=1e-12)


@pytest.mark.skipif(_kernels is None, reason="compiled core not built")
@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_backends_agree(dtype, tol):
    x, dy, gamma, beta = data(dtype=dtype, n=16, h=32, seed=9)
    np.testing.assert_allclose(_kernels.gelu_fwd(x), _kernels_np.gelu_fwd(x),
                               rtol=tol, atol=tol)
    np.testing.assert_allclose(_kernels.gelu_bwd(x, dy),
                               _kernels_np.gelu_bwd(x, dy),
                               rtol=tol, atol=tol)
    for a, b in zip(_kernels.layernorm_fwd(x, gamma, beta, 1e-5),
                    _kernels_np.layernorm_fwd(x, gamma, beta, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    _, mean, rstd = _kernels_np.layernorm_fwd(x, gamma, beta, 1e-5)
    for a, b in zip(_kernels.layernorm_bwd(x, gamma, mean, rstd, dy),
                    _kernels_np.layernorm_bwd(x, gamma, mean, rstd, dy)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=10 * tol)
    for a, b in zip(_kernels.normalize_rows_fwd(x),
                    _kernels_np.normalize_rows_fwd(x)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)

    p1 = x[0].copy(); m1 = np.zeros_like(p1); v1 = np.zeros_like(p1)
    p2 = x[0].copy(); m2 = np.zeros_like(p2); v2 = np.zeros_like(p2)
    args = (3e-4, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
    _kernels.adamw_update(p1, dy[0].copy(), m1, v1, *args)
    _kernels_np.adamw_update(p2, dy[0].copy(), m2, v2, *args)
    np.testing.assert_allclose(p1, p2, rtol=tol, atol=tol)


def test_wrapper_backend_name():
    assert kernels.BACKEND in ("compiled", "fallback")


def test_wrapper_forced_fallback_env(tmp_path):
    # DUALA_NO_EXT selection happens at import; run a child interpreter
    import subprocess
    import sys
    code = ("import os; os.environ['DUALA_NO_EXT']='1'; "
            "from duala import kernels; print(kernels.BACKEND)")
    out = subprocess.run([sys.executable, "-c", code],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "fallback"


def test_wrapper_handles_noncontiguous_input():
    x, _, _, _ = data()
    strided = x[:, ::2]
    direct = kernels.gelu_fwd(np.ascontiguousarray(strided))
    via_wrapper = kernels.gelu_fwd(strided)
    np.testing.assert_array_equal(via_wrapper, direct)
