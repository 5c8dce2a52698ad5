"""Time the compiled kernels against the numpy fallback on representative inputs.

Usage: python3 benchmarks/bench_kernels.py [--rows 20000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from pickrank.kernels import _pykernels

try:
    from pickrank.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def split_case(n, d=20, n_nodes=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[:, :5] = np.round(X[:, :5])  # a few low-cardinality columns, like cup counts
    order = np.argsort(X, axis=0, kind="stable").T
    sorted_idx = np.ascontiguousarray(order, dtype=np.int32)
    sorted_vals = np.ascontiguousarray(np.take_along_axis(X.T, order, axis=1))
    node_of = rng.integers(0, n_nodes, size=n).astype(np.int32)
    p = rng.uniform(0.05, 0.95, size=n)
    y = (rng.uniform(size=n) < p).astype(float)
    g, h, w = p - y, p * (1 - p), np.ones(n)
    G = np.bincount(node_of, weights=g, minlength=n_nodes)
    H = np.bincount(node_of, weights=h, minlength=n_nodes)
    W = np.bincount(node_of, weights=w, minlength=n_nodes)
    return (sorted_vals, sorted_idx, node_of, g, h, w, G, H, W, 3.0, 20.0), X


def forest_case(X, n_trees=200, depth=6, seed=1):
    rng = np.random.default_rng(seed)
    feature, threshold, left, right, value, roots = [], [], [], [], [], []
    for _ in range(n_trees):
        base = len(feature)
        roots.append(base)
        n_internal = 2 ** depth - 1
        for k in range(2 ** (depth + 1) - 1):
            if k < n_internal:
                feature.append(int(rng.integers(0, X.shape[1])))
                threshold.append(float(rng.normal()))
                left.append(base + 2 * k + 1)
                right.append(base + 2 * k + 2)
                value.append(0.0)
            else:
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(float(rng.normal()))
    i32 = lambda a: np.asarray(a, dtype=np.int32)  # noqa: E731
    return (i32(feature), np.asarray(threshold), i32(left), i32(right),
            np.zeros(len(feature), dtype=np.uint8), np.asarray(value), i32(roots))


def grid_case(seed=2):
    rng = np.random.default_rng(seed)
    owner = np.full((160, 100), -1, dtype=np.int32)
    top = np.zeros((160, 100))
    for pid in range(15):
        i, j = rng.integers(0, 140), rng.integers(0, 80)
        owner[i:i + 20, j:j + 20] = pid
        top[i:i + 20, j:j + 20] = rng.uniform(0.05, 0.6)
    n = 300
    px, py = rng.uniform(0.2, 1.4, n), rng.uniform(0.2, 0.8, n)
    pz = rng.uniform(0.0, 0.5, n)
    yaw = rng.uniform(0, np.pi, n)
    e = 0.125
    return (top, owner, 0.01, px, py, pz, e * np.cos(yaw), e * np.sin(yaw),
            -e * np.sin(yaw), e * np.cos(yaw), rng.integers(0, 15, n).astype(np.int32), 0.02)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can run")
        return

    split_args, X = split_case(args.rows)
    forest = forest_case(X)
    grid = grid_case()
    owner = grid[1]
    node_of = split_args[2]
    split_feat = np.asarray([3, -1, 7, 1, -1, 0, 2, 9], dtype=np.int32)
    split_thr = np.zeros(8)
    child = np.full(16, -1, dtype=np.int32)
    c = 0
    for k in range(8):
        if split_feat[k] >= 0:
            child[2 * k], child[2 * k + 1] = c, c + 1
            c += 2
    part_args = (np.ascontiguousarray(X), node_of, split_feat, split_thr, child,
                 split_args[3], split_args[4], split_args[5], c)

    cases = [
        ("best_splits", lambda m: m.best_splits(*split_args)),
        ("partition_rows", lambda m: m.partition_rows(*part_args)),
        ("predict_forest", lambda m: m.predict_forest(np.ascontiguousarray(X), *forest,
                                                      np.zeros(X.shape[0]))),
        ("neighbor_pairs", lambda m: m.neighbor_pairs(owner, 3, 15)),
        ("plate_blocked", lambda m: m.plate_blocked(*grid)),
    ]
    print(f"{'kernel':<16} {'compiled (ms)':>14} {'numpy (ms)':>12} {'speedup':>9}")
    for name, fn in cases:
        tc = _timeit(lambda: fn(_ckernels), args.repeat)
        tp = _timeit(lambda: fn(_pykernels), args.repeat)
        print(f"{name:<16} {1e3 * tc:>14.2f} {1e3 * tp:>12.2f} {tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
