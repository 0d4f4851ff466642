# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled xoshiro256** stream kernels (hot path for sampling-heavy audits)."""

import numpy as np

cimport numpy as cnp

ctypedef cnp.uint64_t u64

BACKEND = "cython"


cdef inline u64 _rotl(u64 x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def fill_u64(cnp.ndarray[u64, ndim=1] state, cnp.ndarray[u64, ndim=1] out):
    """Advance one xoshiro256** stream len(out) steps, writing outputs."""
    cdef u64 s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef u64 t
    cdef Py_ssize_t i, n = out.shape[0]
    with nogil:
        for i in range(n):
            out[i] = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


def fill_u64_multi(cnp.ndarray[u64, ndim=2] states, cnp.ndarray[u64, ndim=2] out):
    """Advance K parallel streams in lockstep; out has shape (K, m)."""
    cdef Py_ssize_t k, j, K = out.shape[0], m = out.shape[1]
    cdef u64 s0, s1, s2, s3, t
    with nogil:
        for k in range(K):
            s0 = states[k, 0]
            s1 = states[k, 1]
            s2 = states[k, 2]
            s3 = states[k, 3]
            for j in range(m):
                out[k, j] = _rotl(s1 * 5, 7) * 9
                t = s1 << 17
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = _rotl(s3, 45)
            states[k, 0] = s0
            states[k, 1] = s1
            states[k, 2] = s2
            states[k, 3] = s3
