"""Benchmark the compiled kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from styledistill import _kernels_py

try:
    from styledistill import _kernels_cy
except ImportError:
    _kernels_cy = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((256, 8))
    K = rng.standard_normal((2560, 8))
    V = rng.standard_normal((2560, 8))
    yield "attention 256x2560x8", lambda m: m.attention(Q, K, V, 0.35)
    X = rng.standard_normal((4096, 16))
    yield "channel_moments 4096x16", lambda m: m.channel_moments(X)
    pts = rng.standard_normal((4096, 8))
    cts = rng.standard_normal((256, 8))
    yield "nearest_rows 4096->256", lambda m: m.nearest_rows(pts, cts)
    A = rng.standard_normal((4096, 3))
    B = rng.standard_normal((4096, 3))
    yield "min_sqdist 4096x4096", lambda m: m.min_sqdist(A, B)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if _kernels_cy is None:
        print("compiled kernels unavailable; showing the fallback only")
    header = f"{'kernel':28s} {'python':>10s} {'cython':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, call in cases():
        t_py = best_of(lambda: call(_kernels_py), args.repeats)
        if _kernels_cy is not None:
            t_cy = best_of(lambda: call(_kernels_cy), args.repeats)
            print(f"{name:28s} {t_py * 1e3:9.2f}ms {t_cy * 1e3:9.2f}ms {t_py / t_cy:7.2f}x")
        else:
            print(f"{name:28s} {t_py * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
