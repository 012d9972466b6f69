"""Numba vs numpy timings of the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Both implementations are called directly, independent of ``RADIPRIOR_NUMBA``.
The first numba call (JIT compilation or cache load) is excluded.
"""
import argparse
import time

import numpy as np

from radiprior import kernels as K


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    n = 4096 * 4
    pos = rng.random((n, 3))
    res = np.array([16 * 1.5 ** k for k in range(8)])
    table = rng.normal(size=(8 * 2 ** 14, 2)).astype(np.float32)
    _, idx, wts = K.hash_grid_forward_numpy(pos, res, table, 2 ** 14)
    grad = rng.normal(size=(n, 16)).astype(np.float32)

    tris = 512
    v0 = rng.normal(size=(tris, 3))
    e1 = rng.normal(size=(tris, 3)) * 0.2
    e2 = rng.normal(size=(tris, 3)) * 0.2
    o = rng.normal(size=(4096, 3)) * 3
    d = -o / np.linalg.norm(o, axis=1, keepdims=True)
    tmin, tmax = np.full(4096, 1e-4), np.full(4096, np.inf)

    return {
        "hash_grid_forward (16k pts, 8 levels)": (
            lambda: K.hash_grid_forward_numpy(pos, res, table, 2 ** 14),
            lambda: K.hash_grid_forward_numba(pos, res, table, 2 ** 14)),
        "hash_grid_backward (16k pts)": (
            lambda: K.hash_grid_backward_numpy(idx, wts, grad, table.shape[0], 2),
            lambda: K.hash_grid_backward_numba(idx, wts, grad, table.shape[0], 2)),
        "intersect_triangles (4k rays x 512 tris)": (
            lambda: K.intersect_triangles_numpy(o, d, tmin, tmax, v0, e1, e2),
            lambda: K.intersect_triangles_numba(o, d, tmin, tmax, v0, e1, e2)),
        "rr_path_lengths (1e6 paths, albedo 0.9)": (
            lambda: K.rr_path_lengths_numpy(0.9, 10 ** 6, 1.0, 0.0, 1, 0, 0),
            lambda: K.rr_path_lengths_numba(0.9, 10 ** 6, 1.0, 0.0, 1, 0, 0)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':45s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, (f_np, f_nb) in cases(rng).items():
        t_np = _best(f_np, args.repeat)
        t_nb = _best(f_nb, args.repeat)
        print(f"{name:45s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
