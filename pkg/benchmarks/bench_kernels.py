"""Compare the numba and numpy Jacobi SVD kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 8x8,64x32,512x64]

Both paths run the same rotation schedule, so besides timing the script also
reports the largest singular-value difference between them.
"""
import argparse
import time

import numpy as np

from inflora._jit import USE_NUMBA
from inflora.linalg import svd


def _sizes(text):
    return [tuple(int(v) for v in s.split("x")) for s in text.split(",")]


def bench(a, repeat, use_numba):
    svd(a, use_numba=use_numba)  # compile / warm up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        res = svd(a, use_numba=use_numba)
        times.append(time.perf_counter() - start)
    return min(times), res


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--sizes", type=_sizes, default=_sizes("8x8,64x32,256x64,512x64"))
    args = p.parse_args()
    if not USE_NUMBA:
        print("numba disabled or missing: the 'numba' column runs the numpy kernel")
    rng = np.random.default_rng(0)
    print(f"{'shape':>10} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |ds|':>10}")
    for shape in args.sizes:
        a = rng.standard_normal(shape)
        t_jit, r_jit = bench(a, args.repeat, True)
        t_np, r_np = bench(a, args.repeat, False)
        ds = float(np.max(np.abs(r_jit.s - r_np.s)))
        label = f"{shape[0]}x{shape[1]}"
        print(f"{label:>10} {t_jit * 1e3:>10.3f} {t_np * 1e3:>10.3f} {t_np / t_jit:>8.1f} {ds:>10.2e}")


if __name__ == "__main__":
    main()
