# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Cython twin of `_kernels_py` -- same functions, bit-identical results."""

from libc.stdint cimport uint64_t

MASK64 = 0xFFFFFFFFFFFFFFFF

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL

BACKEND = "cython"


cdef inline uint64_t _mix64(uint64_t x) nogil:
    cdef uint64_t z = x + GOLDEN
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def mix64(x):
    """splitmix64 finalizer."""
    return _mix64(<uint64_t> x)


def fnv1a(data):
    cdef const unsigned char[:] view = data
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        h = (h ^ view[i]) * FNV_PRIME
    return h


def draw_u64(key, counter):
    """The counter-th draw of the stream identified by key."""
    return _mix64(<uint64_t> key + <uint64_t> counter * GOLDEN)


def bernoulli_count(key, counter, n, threshold):
    """Number of successes among n Bernoulli draws (draw < threshold)."""
    cdef uint64_t k = <uint64_t> key
    cdef uint64_t c = <uint64_t> counter
    cdef uint64_t thr = <uint64_t> threshold
    cdef Py_ssize_t count = <Py_ssize_t> n
    cdef Py_ssize_t i
    cdef Py_ssize_t hits = 0
    with nogil:
        for i in range(count):
            if _mix64(k + (c + <uint64_t> i) * GOLDEN) < thr:
                hits += 1
    return hits


def geometric_attempts(key, counter, fail_threshold, max_attempts):
    """Failures before the first success, capped at max_attempts."""
    cdef uint64_t k = <uint64_t> key
    cdef uint64_t c = <uint64_t> counter
    cdef uint64_t thr = <uint64_t> fail_threshold
    cdef Py_ssize_t cap = <Py_ssize_t> max_attempts
    cdef Py_ssize_t i
    for i in range(cap):
        if _mix64(k + (c + <uint64_t> i) * GOLDEN) >= thr:
            return i
    return cap
