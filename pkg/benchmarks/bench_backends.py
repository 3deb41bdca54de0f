#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against the pure-numpy fallback.

Times the four hot kernels (exclusive scan, cell accumulation, rulebook
construction, gather-FMA-scatter) on identical inputs from both backend
modules and checks that the results agree.  The numba timings exclude JIT
compilation (one warmup call per kernel).

Usage:
    python benchmarks/bench_backends.py [--repeats 5] [--voxels 20000]
"""

import argparse
import time

import numpy as np

from voxmoe import _kernels_numpy as knp
from voxmoe.spconv import tap_displacements

try:
    from voxmoe import _kernels_numba as knb
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def best_of(fn, args, repeats):
    fn(*args)  # warmup (and JIT compile for the numba twin)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def build_workloads(n_voxels, seed):
    rng = np.random.default_rng(seed)

    flags = rng.integers(0, 4, size=1_000_000).astype(np.int64)

    n_points = 1_000_000
    keys = np.sort(rng.integers(0, 50_000, size=n_points).astype(np.int64))
    xyz = rng.standard_normal((n_points, 3))
    intensity = rng.uniform(0, 1, n_points)

    extent = 64
    cells = extent ** 3
    picked = np.sort(rng.choice(cells, size=n_voxels, replace=False).astype(np.int64))
    x, rest = np.divmod(picked, extent * extent)
    y, z = np.divmod(rest, extent)
    coords = np.stack([x, y, z], axis=1)
    extents = np.array([extent] * 3, np.int64)
    taps = tap_displacements((3, 3, 3))

    pin, pout, counts = knp.rulebook_pairs(coords, picked, extents, taps, 1)
    cin, cout = 16, 16
    feats = rng.standard_normal((n_voxels, cin))
    weights = rng.standard_normal((27, cin, cout))

    return {
        "exclusive_scan": ((flags, 8), None),
        "accumulate_cells": ((keys, xyz, intensity), None),
        "rulebook_pairs": ((coords, picked, extents, taps, 1), None),
        "scatter_fma": ((feats, weights, pin, pout, counts, n_voxels), None),
    }


def check_agreement(name, a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    for x, y in zip(a, b):
        if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
            assert np.allclose(x, y, rtol=0, atol=1e-9), name
        else:
            assert np.array_equal(np.asarray(x), np.asarray(y)), name


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--voxels", type=int, default=20_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    workloads = build_workloads(args.voxels, args.seed)
    print(f"{'kernel':<18} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}")
    for name, (call_args, _) in workloads.items():
        np_fn = getattr(knp, name)
        t_np = best_of(np_fn, call_args, args.repeats)
        if HAVE_NUMBA:
            nb_fn = getattr(knb, name)
            check_agreement(name, np_fn(*call_args), nb_fn(*call_args))
            t_nb = best_of(nb_fn, call_args, args.repeats)
            print(f"{name:<18} {t_np * 1e3:>12.3f} {t_nb * 1e3:>12.3f} "
                  f"{t_np / t_nb:>8.2f}x")
        else:
            print(f"{name:<18} {t_np * 1e3:>12.3f} {'n/a':>12} {'n/a':>9}")
    if not HAVE_NUMBA:
        print("numba not importable; only the fallback was timed")


if __name__ == "__main__":
    main()
