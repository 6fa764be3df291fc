"""Benchmark the numba kernels against their pure-numpy twins.

The hot loops are the Riccati fixed-point iterations driving the gamma
bisection.  Run:

    python benchmarks/bench_kernels.py

Backend selection honors ETC_HINF_BACKEND; this script times both
explicitly (the first numba call compiles, so a warmup pass runs first).
"""

import time

import numpy as np

from etc_hinf import backend, riccati


def systems():
    scalar = riccati.SystemModel.from_matrices([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    a3 = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -2.0, -1.0]]
    third = riccati.SystemModel.from_matrices(a3, [[0.0], [0.0], [1.0]],
                                              np.eye(3), [[1.0]])
    rng = np.random.default_rng(0)
    n = 8
    a8 = rng.normal(size=(n, n)) * 0.5
    b8 = rng.normal(size=(n, 2))
    q8 = np.eye(n)
    r8 = np.eye(2)
    dense = riccati.SystemModel.from_matrices(a8, b8, q8, r8)
    return [("scalar", scalar), ("third-order", third), ("dense-8", dense)]


def time_call(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    cases = systems()
    names = ["numpy"] + (["numba"] if backend._numba_available() else [])
    print("backends:", ", ".join(names))
    results = {}
    for name in names:
        with backend.use_backend(name):
            for label, sysm in cases:
                riccati.gamma_table(sysm, 2)  # warmup / JIT
                results[(name, label, "gamma_table(5)")] = time_call(
                    lambda s=sysm: riccati.gamma_table(s, 5))
                g1 = riccati.gamma_h(sysm, 1)
                results[(name, label, "solve_pbar x100")] = time_call(
                    lambda s=sysm, g=g1: [riccati.solve_pbar(s, g * (1.1 + 0.01 * i))
                                          for i in range(100)])
    print("%-12s %-18s %12s %12s %9s" % ("system", "workload", "numpy [ms]",
                                         "numba [ms]", "speedup"))
    for label, _ in cases:
        for work in ("gamma_table(5)", "solve_pbar x100"):
            t_np = results[("numpy", label, work)] * 1e3
            if ("numba", label, work) in results:
                t_nb = results[("numba", label, work)] * 1e3
                print("%-12s %-18s %12.2f %12.2f %8.1fx"
                      % (label, work, t_np, t_nb, t_np / t_nb))
            else:
                print("%-12s %-18s %12.2f %12s %9s" % (label, work, t_np, "-", "-"))


if __name__ == "__main__":
    main()
