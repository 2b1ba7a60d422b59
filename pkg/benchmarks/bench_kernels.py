"""Benchmark the compiled ADMM kernels against the pure-Python fallback.

Times the two inner solvers (penalized quantile regression and the
l1-regularized quadratic program) backend by backend on identical inputs
and reports per-solve times and the speedup.

Usage:  python3 benchmarks/bench_kernels.py [--n 400] [--p 60] [--reps 5]
"""
import argparse
import time

import numpy as np

from rankscore import _kernels_py

try:
    from rankscore import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _qr_inputs(rng, n, p):
    X = np.ascontiguousarray(rng.standard_normal((n, p)))
    X[:, 0] = 1.0
    beta = np.zeros(p)
    beta[:5] = rng.standard_normal(5)
    y = np.ascontiguousarray(X @ beta + rng.standard_normal(n))
    gram = X.T @ X
    gram[np.diag_indices_from(gram)] += 1.0
    chol_l = np.linalg.cholesky(gram)
    thr = np.full(p, 2.0)
    return X, y, chol_l, thr


def bench_qr(kernels, rng, n, p, iters):
    X, y, chol_l, thr = _qr_inputs(rng, n, p)
    theta = np.zeros(p)
    r = y.copy()
    s = np.zeros(p)
    u1 = np.zeros(n)
    u2 = np.zeros(p)
    t0 = time.perf_counter()
    kernels.penalized_qr_admm(X, y, chol_l, thr, 0.5, 1.0, 0.0, iters,
                              1.0, 10.0, theta, r, s, u1, u2)
    return time.perf_counter() - t0


def bench_quad(kernels, rng, p, iters):
    B = rng.standard_normal((4 * p, p))
    A = np.ascontiguousarray(B.T @ B / (4 * p))
    lin = np.ascontiguousarray(rng.standard_normal(p))
    v = np.zeros(p)
    u = np.zeros(p)
    w = np.zeros(p)
    t0 = time.perf_counter()
    kernels.l1_quad_admm(A, lin, 0.1, 1.0, 0.0, iters, 1.0, 10.0, -1e12,
                         v, u, w)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--p", type=int, default=60)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--iters", type=int, default=2000,
                    help="fixed ADMM iterations per solve")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.append(("cython", _kernels_c))
    else:
        print("note: compiled kernels unavailable; timing the fallback only")

    results = {}
    for label, bench, extra in (("penalized_qr_admm", bench_qr, (args.n,)),
                                ("l1_quad_admm", bench_quad, ())):
        results[label] = {}
        for name, mod in backends:
            times = []
            for rep in range(args.reps):
                rng = np.random.default_rng((args.seed, rep))
                times.append(bench(mod, rng, *extra, args.p, args.iters))
            results[label][name] = min(times)

    print(f"\nproblem: n={args.n}, p={args.p}, {args.iters} iterations, "
          f"best of {args.reps}")
    print(f"{'kernel':<22}{'python':>12}{'cython':>12}{'speedup':>10}")
    for label, timed in results.items():
        py = timed["python"]
        if "cython" in timed:
            cy = timed["cython"]
            print(f"{label:<22}{py:>11.4f}s{cy:>11.4f}s{py / cy:>9.1f}x")
        else:
            print(f"{label:<22}{py:>11.4f}s{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
