# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; same contract as ``pfan._geometry_py``."""
import numpy as np

from libc.stdint cimport int64_t


def overlap_counts(boxes, long width, long height, long k):
    cdef const int64_t[:, :] b = np.ascontiguousarray(boxes, dtype=np.int64)
    cdef Py_ssize_t n = b.shape[0]
    out_arr = np.zeros((n, k * k), dtype=np.int64)
    cdef int64_t[:, :] out = out_arr
    xs_arr = np.array([(i * width) // k for i in range(k + 1)], dtype=np.int64)
    ys_arr = np.array([(i * height) // k for i in range(k + 1)], dtype=np.int64)
    cdef int64_t[:] xs = xs_arr
    cdef int64_t[:] ys = ys_arr
    ow_arr = np.empty(k, dtype=np.int64)
    oh_arr = np.empty(k, dtype=np.int64)
    cdef int64_t[:] ow = ow_arr
    cdef int64_t[:] oh = oh_arr
    cdef Py_ssize_t i, r, c
    cdef int64_t lo, hi
    for i in range(n):
        for c in range(k):
            lo = b[i, 0] if b[i, 0] > xs[c] else xs[c]
            hi = b[i, 2] if b[i, 2] < xs[c + 1] else xs[c + 1]
            ow[c] = hi - lo if hi > lo else 0
        for r in range(k):
            lo = b[i, 1] if b[i, 1] > ys[r] else ys[r]
            hi = b[i, 3] if b[i, 3] < ys[r + 1] else ys[r + 1]
            oh[r] = hi - lo if hi > lo else 0
        for r in range(k):
            if oh[r] == 0:
                continue
            for c in range(k):
                out[i, r * k + c] = oh[r] * ow[c]
    return out_arr


def select_top(counts, long l):
    cdef const int64_t[:, :] cnt = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t n = cnt.shape[0], m = cnt.shape[1]
    out_arr = np.empty((n, l), dtype=np.int64)
    cdef int64_t[:, :] out = out_arr
    best_arr = np.empty(l, dtype=np.int64)
    cdef int64_t[:] best = best_arr
    cdef Py_ssize_t i, q, j, filled
    cdef int64_t v
    for i in range(n):
        filled = 0
        for q in range(m):
            v = cnt[i, q]
            if filled == l and v <= best[l - 1]:
                continue
            # insertion after every entry >= v keeps lower indices first on ties
            j = filled if filled < l else l - 1
            while j > 0 and best[j - 1] < v:
                best[j] = best[j - 1]
                out[i, j] = out[i, j - 1]
                j -= 1
            best[j] = v
            out[i, j] = q
            if filled < l:
                filled += 1
    return out_arr
