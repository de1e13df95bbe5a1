# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot inner loops: attention, channel moments,
nearest-centroid assignment and nearest-neighbour squared distances."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def attention(double[:, ::1] Q, double[:, ::1] K, double[:, ::1] V, double scale):
    cdef Py_ssize_t n = Q.shape[0], d = Q.shape[1]
    cdef Py_ssize_t m = K.shape[0], dv = V.shape[1]
    out_arr = np.zeros((n, dv), dtype=np.float64)
    row_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] row = row_arr
    cdef Py_ssize_t i, j, k
    cdef double s, mx, tot, w
    for i in range(n):
        mx = -1e300
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += Q[i, k] * K[j, k]
            s *= scale
            row[j] = s
            if s > mx:
                mx = s
        tot = 0.0
        for j in range(m):
            w = exp(row[j] - mx)
            row[j] = w
            tot += w
        for j in range(m):
            w = row[j] / tot
            for k in range(dv):
                out[i, k] += w * V[j, k]
    return out_arr


def channel_moments(double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], c = X.shape[1]
    mean_arr = np.zeros(c, dtype=np.float64)
    m2_arr = np.zeros(c, dtype=np.float64)
    m3_arr = np.zeros(c, dtype=np.float64)
    m4_arr = np.zeros(c, dtype=np.float64)
    cdef double[::1] mean = mean_arr, m2 = m2_arr, m3 = m3_arr, m4 = m4_arr
    cdef Py_ssize_t i, j
    cdef double s, d, d2
    for j in range(c):
        s = 0.0
        for i in range(n):
            s += X[i, j]
        mean[j] = s / n
    for j in range(c):
        for i in range(n):
            d = X[i, j] - mean[j]
            d2 = d * d
            m2[j] += d2
            m3[j] += d2 * d
            m4[j] += d2 * d2
        m2[j] /= n
        m3[j] /= n
        m4[j] /= n
    return mean_arr, m2_arr, m3_arr, m4_arr


def nearest_rows(double[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t k = centroids.shape[0]
    labels_arr = np.zeros(n, dtype=np.int64)
    dist_arr = np.zeros(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, t, best
    cdef double sq, diff, best_sq
    for i in range(n):
        best = 0
        best_sq = 1e300
        for j in range(k):
            sq = 0.0
            for t in range(d):
                diff = points[i, t] - centroids[j, t]
                sq += diff * diff
            if sq < best_sq:
                best_sq = sq
                best = j
        labels[i] = best
        dist[i] = best_sq
    return labels_arr, dist_arr


def min_sqdist(double[:, ::1] A, double[:, ::1] B):
    cdef Py_ssize_t n = A.shape[0], d = A.shape[1], m = B.shape[0]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double sq, diff, best
    for i in range(n):
        best = 1e300
        for j in range(m):
            sq = 0.0
            for t in range(d):
                diff = A[i, t] - B[j, t]
                sq += diff * diff
            if sq < best:
                best = sq
        out[i] = best
    return out_arr
