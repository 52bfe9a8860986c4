"""Compiled vs pure-Python kernels: graph construction, BFS and search.

Run with ``python3 benchmarks/bench_kernels.py [--n 3000] [--d 32]``.
"""

import argparse
import time

import numpy as np

from graphroute import kernels
from graphroute.data import generate_synthetic
from graphroute.graph import SimilarityGraph

BACKENDS = {"compiled": kernels, "python": kernels.python_backend}


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(n, d, max_m, ef, n_queries, dcs, repeat):
    ds = generate_synthetic(n, d, max(n // 150, 1), 0)
    X = np.asarray(ds.base, dtype=np.float64)
    Q = np.asarray(ds.test_queries[:n_queries], dtype=np.float64)
    nbrs, deg = kernels.build_nsw(X, max_m, ef)
    g = SimilarityGraph.from_lists([nbrs[v, :deg[v]] for v in range(len(X))], max_m)
    rows = []
    for name, be in BACKENDS.items():
        if name == "compiled" and kernels.BACKEND == kernels.python_backend.BACKEND:
            continue
        t_build = _time(lambda: be.build_nsw(X, max_m, ef), 1)
        t_bfs = _time(lambda: be.bfs(g.indptr, g.indices, 0), repeat)

        def searches():
            for q in Q:
                be.search(g.indptr, g.indices, 0, X, q, kernels.SCORE_NEG_L2, 1.0, dcs,
                          kernels.POLICY_BEST, np.zeros(0), np.zeros(0, np.int32), -1, False, 0)

        t_search = _time(searches, repeat)
        rows.append((name, t_build, t_bfs * 1e3, t_search / len(Q) * 1e6))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3000, help="points (default: 3000)")
    ap.add_argument("--d", type=int, default=32, help="dimension (default: 32)")
    ap.add_argument("--max-m", type=int, default=16, help="out-degree bound (default: 16)")
    ap.add_argument("--ef", type=int, default=100, help="construction beam (default: 100)")
    ap.add_argument("--queries", type=int, default=200, help="search queries (default: 200)")
    ap.add_argument("--dcs", type=int, default=256, help="scorings per search (default: 256)")
    ap.add_argument("--repeat", type=int, default=3, help="timing repeats, best kept (default: 3)")
    a = ap.parse_args()
    rows = run(a.n, a.d, a.max_m, a.ef, a.queries, a.dcs, a.repeat)
    print(f"n={a.n} d={a.d} MaxM={a.max_m} ef={a.ef} dcs={a.dcs}")
    print(f"{'backend':<10} {'build s':>10} {'bfs ms':>10} {'search us/q':>12}")
    for name, b, f, s in rows:
        print(f"{name:<10} {b:>10.3f} {f:>10.3f} {s:>12.1f}")
    if len(rows) == 2:
        (_, b0, f0, s0), (_, b1, f1, s1) = rows
        print(f"{'speedup':<10} {b1 / b0:>9.1f}x {f1 / f0:>9.1f}x {s1 / s0:>11.1f}x")


if __name__ == "__main__":
    main()
