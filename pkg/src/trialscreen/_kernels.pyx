# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: signed trigram hashing and score scans.

Semantics must match trialscreen._kernels_py; ngram_counts bit-for-bit,
dot_scores up to float64 summation order.
"""

import numpy as np


cdef unsigned long long FNV_OFFSET = 0xCBF29CE484222325ULL
cdef unsigned long long FNV_PRIME = 0x100000001B3ULL


def ngram_counts(const unsigned char[::1] buf, int dims):
    cdef Py_ssize_t n_chars = buf.shape[0] // 4
    out_arr = np.zeros(dims, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef unsigned long long h
    cdef unsigned long long udims = <unsigned long long> dims
    with nogil:
        for i in range(n_chars - 2):
            h = FNV_OFFSET
            for j in range(4 * i, 4 * i + 12):
                h = (h ^ <unsigned long long> buf[j]) * FNV_PRIME
            if h & 1ULL:
                out[(h >> 1) % udims] += 1
            else:
                out[(h >> 1) % udims] -= 1
    return out_arr


def dot_scores(const float[:, ::1] matrix, const double[::1] query):
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += (<double> matrix[i, j]) * query[j]
            out[i] = acc
    return out_arr
