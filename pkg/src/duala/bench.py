"""Microbenchmark comparing the compiled kernel core with the fallback.

Run as `python -m duala.bench`. Times the elementwise hot kernels (GELU,
layer normalization, row normalization, optimizer update) on both backends
at training-like shapes, checks that the two agree numerically, and prints
a speedup table. Useful after building the extension to confirm it is both
active and worth having.
"""

import argparse
import sys
import time

import numpy as np

from duala import _kernels_np

try:
    from duala import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best * 1e3  # ms


def _cases(n, h, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, h)).astype(np.float32)
    dy = rng.standard_normal((n, h)).astype(np.float32)
    gamma = rng.standard_normal(h).astype(np.float32)
    beta = rng.standard_normal(h).astype(np.float32)
    _, mean, rstd = _kernels_np.layernorm_fwd(x, gamma, beta, 1e-5)
    y, norms = _kernels_np.normalize_rows_fwd(x)
    g = rng.standard_normal((n, h)).astype(np.float32)

    def adamw(mod):
        # fresh state per call so repeated timing does not drift p
        p = x.copy().reshape(-1) if mod is _kernels else x.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        gg = g.reshape(-1) if mod is _kernels else g
        mod.adamw_update(p, gg, m, v, 3e-4, 0.9, 0.999, 1e-8, 0.01,
                         0.1, 0.001)
        return p

    return [
        ("gelu_fwd", lambda mod: mod.gelu_fwd(x)),
        ("gelu_bwd", lambda mod: mod.gelu_bwd(x, dy)),
        ("layernorm_fwd", lambda mod: mod.layernorm_fwd(x, gamma, beta,
                                                        1e-5)),
        ("layernorm_bwd", lambda mod: mod.layernorm_bwd(x, gamma, mean,
                                                        rstd, dy)),
        ("normalize_fwd", lambda mod: mod.normalize_rows_fwd(x)),
        ("normalize_bwd", lambda mod: mod.normalize_rows_bwd(y, norms, dy)),
        ("adamw_update", adamw),
    ]


def _flat(result):
    if isinstance(result, tuple):
        return np.concatenate([np.asarray(r).ravel() for r in result])
    return np.asarray(result).ravel()


def run(n=512, h=256, repeats=5, inner=50):
    print(f"kernel benchmark: shape ({n}, {h}), float32, "
          f"best of {repeats} x {inner} calls")
    if _kernels is None:
        print("compiled core not available; timing fallback only")
    header = f"{'op':16s} {'fallback ms':>12s}"
    if _kernels is not None:
        header += f" {'compiled ms':>12s} {'speedup':>8s} {'max|diff|':>10s}"
    print(header)
    for name, call in _cases(n, h):
        t_np = _time(lambda: call(_kernels_np), repeats, inner)
        line = f"{name:16s} {t_np:12.4f}"
        if _kernels is not None:
            t_cy = _time(lambda: call(_kernels), repeats, inner)
            diff = float(np.max(np.abs(_flat(call(_kernels_np)) -
                                       _flat(call(_kernels)))))
            line += f" {t_cy:12.4f} {t_np / t_cy:7.2f}x {diff:10.2e}"
        print(line)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=512)
    parser.add_argument("--cols", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--inner", type=int, default=50)
    args = parser.parse_args(argv)
    return run(args.rows, args.cols, args.repeats, args.inner)


if __name__ == "__main__":
    sys.exit(main())
