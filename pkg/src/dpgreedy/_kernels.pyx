# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()


def lattice_neighbors(points, double step, offset, double radius,
                      double max_norm, stencil):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] off = np.ascontiguousarray(offset, dtype=np.float64)
    cdef const long long[:, ::1] S = np.ascontiguousarray(stencil, dtype=np.int64)
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], ns = S.shape[0]
    cdef Py_ssize_t i, s, k, m = 0, pass_
    cdef long long[::1] base = np.empty(d, dtype=np.int64)
    cdef double dist2, norm2, c, r2 = radius * radius, mn2 = max_norm * max_norm
    cdef long long[::1] out_p
    cdef long long[:, ::1] out_i
    cdef double[::1] out_d
    cdef Py_ssize_t total = 0

    for pass_ in range(2):
        if pass_ == 1:
            total = m
            out_p = np.empty(total, dtype=np.int64)
            out_i = np.empty((total, d), dtype=np.int64)
            out_d = np.empty(total, dtype=np.float64)
            m = 0
        for i in range(n):
            for k in range(d):
                base[k] = <long long> floor((P[i, k] - off[k]) / step)
            for s in range(ns):
                dist2 = 0.0
                norm2 = 0.0
                for k in range(d):
                    c = off[k] + step * (base[k] + S[s, k])
                    dist2 += (c - P[i, k]) * (c - P[i, k])
                    norm2 += c * c
                if dist2 <= r2 and norm2 <= mn2:
                    if pass_ == 1:
                        out_p[m] = i
                        for k in range(d):
                            out_i[m, k] = base[k] + S[s, k]
                        out_d[m] = sqrt(dist2)
                    m += 1
    if total == 0:
        return (np.empty(0, np.int64), np.empty((0, d), np.int64),
                np.empty(0, np.float64))
    return np.asarray(out_p), np.asarray(out_i), np.asarray(out_d)


def nearest_center(points, centers):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] C = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], kc = C.shape[0]
    cdef Py_ssize_t i, j, k, arg
    cdef double best, sq, t
    if kc == 0:
        raise ValueError("no centers")
    labels_arr = np.empty(n, dtype=np.int64)
    best_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] out = best_arr
    for i in range(n):
        best = INFINITY
        arg = 0
        for j in range(kc):
            sq = 0.0
            for k in range(d):
                t = P[i, k] - C[j, k]
                sq += t * t
            if sq < best:
                best = sq
                arg = j
        labels[i] = arg
        out[i] = best
    return labels_arr, best_arr


def min_box_distance(points, lo, hi):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] L = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] H = np.ascontiguousarray(hi, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1], kb = L.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double best, sq, g
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        best = INFINITY
        for j in range(kb):
            sq = 0.0
            for k in range(d):
                g = L[j, k] - P[i, k]
                if P[i, k] - H[j, k] > g:
                    g = P[i, k] - H[j, k]
                if g > 0.0:
                    sq += g * g
            if sq < best:
                best = sq
        out[i] = sqrt(best)
    return out_arr
