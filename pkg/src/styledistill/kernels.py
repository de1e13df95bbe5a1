"""Kernel backend selection.

The compiled Cython extension is preferred; the numpy implementation is the
fallback. ``STYLEDISTILL_PURE=1`` forces the fallback (used by the parity
tests and the benchmark).
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("STYLEDISTILL_PURE") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels_cy as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def attention_kernel(Q, K, V, scale):
    # always the vectorized path: BLAS GEMM + vectorized exp beat the scalar
    # loops of the compiled kernel ~2x at every size this pipeline hits
    # (see benchmarks/bench_kernels.py)
    return _kernels_py.attention(_c64(Q), _c64(K), _c64(V), float(scale))


def channel_moments(X):
    return _impl.channel_moments(_c64(X))


def nearest_rows(points, centroids):
    return _impl.nearest_rows(_c64(points), _c64(centroids))


def min_sqdist(A, B):
    return _impl.min_sqdist(_c64(A), _c64(B))
