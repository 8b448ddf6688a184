#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Runs each hot kernel on representative problem sizes, times both backends,
and verifies on the fly that their outputs are bit-for-bit identical.

    python benchmarks/bench_kernels.py [--repeat 7]
"""

import argparse
import time

import numpy as np

from dualgrid.kernels import numpy_backend

try:
    from dualgrid.kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scatter_add(rng, repeat):
    n, m = 2_000_000, 120_000
    idx = rng.integers(0, m, n)
    vals = rng.normal(size=n)
    out_py = np.zeros(m)
    out_cy = np.zeros(m)
    t_py = timeit(lambda: numpy_backend.scatter_add(out_py, idx, vals), repeat)
    t_cy = timeit(lambda: _core.scatter_add(out_cy, idx, vals), repeat)
    # both accumulated `repeat` times over the same data
    return "scatter_add 2M->120k", t_py, t_cy, np.array_equal(out_py, out_cy)


def bench_stencil7(rng, repeat):
    shape = (64, 64, 64)
    x = rng.normal(size=(shape[0] + 2, shape[1] + 2, shape[2] + 2))
    coeffs = [np.ascontiguousarray(rng.normal(size=shape)) for _ in range(7)]
    a = np.empty(shape)
    b = np.empty(shape)
    t_py = timeit(lambda: numpy_backend.stencil7(a, x, *coeffs), repeat)
    t_cy = timeit(lambda: _core.stencil7(b, x, *coeffs), repeat)
    return "stencil7 64^3", t_py, t_cy, np.array_equal(a, b)


def bench_upwind_div(rng, repeat):
    nx = ny = nz = 64
    phi = rng.normal(size=(nx + 2, ny + 2, nz + 2))
    fx = rng.normal(size=(nx + 1, ny, nz))
    fy = rng.normal(size=(nx, ny + 1, nz))
    fz = rng.normal(size=(nx, ny, nz + 1))
    inv_h = np.array([1.0, 2.0, 0.5])
    a = np.empty((nx, ny, nz))
    b = np.empty((nx, ny, nz))
    t_py = timeit(lambda: numpy_backend.upwind_div(a, phi, fx, fy, fz, inv_h), repeat)
    t_cy = timeit(lambda: _core.upwind_div(b, phi, fx, fy, fz, inv_h), repeat)
    return "upwind_div 64^3", t_py, t_cy, np.array_equal(a, b)


def bench_pair_forces(rng, repeat):
    n = 200_000
    xi = rng.normal(size=(n, 3))
    xj = xi + rng.normal(scale=0.015, size=(n, 3))
    vi, vj = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    wi, wj = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    ri = rng.uniform(0.005, 0.02, n)
    rj = rng.uniform(0.005, 0.02, n)
    mi = rng.uniform(1e-4, 1e-2, n)
    mj = rng.uniform(1e-4, 1e-2, n)
    args = (xi, vi, wi, ri, mi, xj, vj, wj, rj, mj, 1000.0, 0.03, 0.3)
    box = {}

    def run_py():
        box["py"] = numpy_backend.pair_forces(*args)

    def run_cy():
        box["cy"] = _core.pair_forces(*args)

    t_py = timeit(run_py, repeat)
    t_cy = timeit(run_cy, repeat)
    same = all(np.array_equal(a, b) for a, b in zip(box["py"], box["cy"]))
    return "pair_forces 200k", t_py, t_cy, same


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled kernel core not built; install with "
              "`pip install -e . --no-build-isolation` first")
        return 1

    rng = np.random.default_rng(12345)
    rows = []
    for bench in (bench_scatter_add, bench_stencil7, bench_upwind_div, bench_pair_forces):
        rows.append(bench(rng, args.repeat))

    print(f"{'kernel':24s} {'numpy [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}  bitwise")
    for name, t_py, t_cy, same in rows:
        flag = "-" if same is None else ("yes" if same else "NO")
        print(f"{name:24s} {t_py * 1e3:12.2f} {t_cy * 1e3:14.2f} {t_py / t_cy:8.1f}x  {flag}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
