"""Pure-numpy kernels. Semantics mirror the compiled extension in
``_kernels_cy``; the two backends agree to float tolerance, not bitwise."""

import numpy as np


def attention(Q, K, V, scale):
    """softmax(Q K^T * scale) V with row-max subtraction for stability."""
    S = (Q @ K.T) * scale
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=1, keepdims=True)
    return S @ V


def channel_moments(X):
    """Per-column mean and 2nd/3rd/4th central moments (population)."""
    mean = X.mean(axis=0)
    D = X - mean
    D2 = D * D
    m2 = D2.mean(axis=0)
    m3 = (D2 * D).mean(axis=0)
    m4 = (D2 * D2).mean(axis=0)
    return mean, m2, m3, m4


def _pairwise_sqdist(A, B):
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :]
    sq -= 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def nearest_rows(points, centroids):
    """Index of the nearest centroid per point (ties -> lowest index) and
    the exact squared distance to it."""
    labels = np.argmin(_pairwise_sqdist(points, centroids), axis=1)
    diff = points - centroids[labels]
    return labels, (diff * diff).sum(axis=1)


def min_sqdist(A, B):
    """Per row of A, squared Euclidean distance to the nearest row of B."""
    idx = np.argmin(_pairwise_sqdist(A, B), axis=1)
    diff = A - B[idx]
    return (diff * diff).sum(axis=1)
