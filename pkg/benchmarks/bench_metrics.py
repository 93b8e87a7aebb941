"""Numba vs pure-numpy distance kernels.

    python3 benchmarks/bench_metrics.py --sizes 64 128 384 --repeat 5

Both backends are imported directly, so the ATMSEG_NUMPY_ONLY flag does not
matter here. Outputs are checked for exact agreement before timing.
"""

import argparse
import time

import numpy as np

from atmseg.metrics import kernels


def blobs(size, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(6):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.05, 0.2) * size
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
    return mask


def best_of(fn, arg, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(arg)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 384])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    # warm-up triggers compilation (or loads the on-disk cache)
    warm = blobs(16, 0)
    kernels.boundary_numba(warm)
    kernels.edt_sq_numba(kernels.boundary_numba(warm))

    print(f"{'size':>6} {'kernel':>9} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for size in args.sizes:
        mask = blobs(size, size)
        edge_np, edge_nb = kernels.boundary_numpy(mask), kernels.boundary_numba(mask)
        assert np.array_equal(edge_np, edge_nb)
        assert np.array_equal(kernels.edt_sq_numpy(edge_np), kernels.edt_sq_numba(edge_nb))
        for name, f_np, f_nb, arg in (
            ("boundary", kernels.boundary_numpy, kernels.boundary_numba, mask),
            ("edt", kernels.edt_sq_numpy, kernels.edt_sq_numba, edge_np),
        ):
            t_np = best_of(f_np, arg, args.repeat)
            t_nb = best_of(f_nb, arg, args.repeat)
            print(f"{size:>6} {name:>9} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
