"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run as: python3 benchmarks/bench_kernels.py

Both implementations are imported directly, so the CALAD_NUMBA flag does
not matter here; the flag only selects which one the package binds at
import time.
"""

import time

import numpy as np

from calad import _kernels


def timeit(fn, *args, repeats=20):
    fn(*args)  # warm-up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    if not _kernels._HAVE_NUMBA:
        print("numba unavailable; benchmarking the numpy path only")
    rng = np.random.default_rng(0)

    print(f"{'kernel':<28} {'size':<18} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for side, window in [(64, 11), (256, 11), (512, 11)]:
        x = rng.normal(size=(side + window - 1, side + window - 1))
        t_np = timeit(_kernels._box_sum_valid_np, x, window)
        if _kernels._HAVE_NUMBA:
            t_nb = timeit(_kernels._box_sum_valid_nb, x, window)
            ratio = f"{t_np / t_nb:7.2f}x"
        else:
            t_nb, ratio = float("nan"), "      -"
        print(f"{'box_sum_valid':<28} {f'{side}x{side} w={window}':<18} "
              f"{t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms {ratio}")

    for side, stride in [(16, 2), (32, 4), (64, 8)]:
        a = rng.normal(size=(side, side))
        kern = rng.normal(size=(4 * stride + 1, 4 * stride + 1))
        t_np = timeit(_kernels._upsample_scatter_np, a, kern, stride)
        if _kernels._HAVE_NUMBA:
            t_nb = timeit(_kernels._upsample_scatter_nb, a, kern, stride)
            ratio = f"{t_np / t_nb:7.2f}x"
        else:
            t_nb, ratio = float("nan"), "      -"
        print(f"{'upsample_scatter':<28} {f'{side}x{side} s={stride}':<18} "
              f"{t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms {ratio}")


if __name__ == "__main__":
    main()
