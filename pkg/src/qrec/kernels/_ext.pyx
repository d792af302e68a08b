# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: single-pass fused loops over float32 buffers.

Semantics are pinned to the numpy backend in ``_py.py``: per-element math is
float64 (exact widening from float32), pooling accumulates float32 in listed
order, so both backends are bit-identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor

cnp.import_array()

BACKEND_NAME = "cython"


def maxabs(values):
    cdef const float[::1] v = np.ascontiguousarray(values, dtype=np.float32).ravel()
    cdef Py_ssize_t i, n = v.shape[0]
    cdef float m = 0.0, a
    if n == 0:
        return np.float32(0.0)
    with nogil:
        for i in range(n):
            a = -v[i] if v[i] < 0 else v[i]
            if a > m:
                m = a
    return np.float32(m)


def row_maxabs(matrix):
    cdef const float[:, ::1] w = np.ascontiguousarray(matrix, dtype=np.float32)
    cdef Py_ssize_t i, j, rows = w.shape[0], cols = w.shape[1]
    out_arr = np.empty(rows, dtype=np.float32)
    cdef float[::1] out = out_arr
    cdef float m, a
    with nogil:
        for i in range(rows):
            m = 0.0
            for j in range(cols):
                a = -w[i, j] if w[i, j] < 0 else w[i, j]
                if a > m:
                    m = a
            out[i] = m
    return out_arr


cdef inline double _round_clamp(double x, double qmax) nogil:
    cdef double mag = floor(fabs(x) + 0.5)
    if mag > qmax:
        mag = qmax
    if mag == 0.0:  # avoid -0.0 outputs so requantization is a fixed point
        return 0.0
    return -mag if x < 0 else mag


def quantize(values, double scale, long qmax):
    shape = values.shape
    cdef const float[::1] v = np.ascontiguousarray(values, dtype=np.float32).ravel()
    cdef Py_ssize_t i, n = v.shape[0]
    out_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] out = out_arr
    cdef double q = <double> qmax
    with nogil:
        for i in range(n):
            out[i] = <int> _round_clamp((<double> v[i]) / scale, q)
    return out_arr.reshape(shape)


def dequantize(codes, double scale):
    shape = codes.shape
    cdef const int[::1] c = np.ascontiguousarray(codes, dtype=np.int32).ravel()
    cdef Py_ssize_t i, n = c.shape[0]
    out_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = <float> ((<double> c[i]) * scale)
    return out_arr.reshape(shape)


def fake_quantize(values, double scale, long qmax):
    shape = values.shape
    cdef const float[::1] v = np.ascontiguousarray(values, dtype=np.float32).ravel()
    cdef Py_ssize_t i, n = v.shape[0]
    out_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] out = out_arr
    cdef double q = <double> qmax
    with nogil:
        for i in range(n):
            out[i] = <float> (_round_clamp((<double> v[i]) / scale, q) * scale)
    return out_arr.reshape(shape)


def fake_quantize_rows(matrix, scales, long qmax):
    cdef const float[:, ::1] w = np.ascontiguousarray(matrix, dtype=np.float32)
    cdef const float[::1] s = np.ascontiguousarray(scales, dtype=np.float32)
    cdef Py_ssize_t i, j, rows = w.shape[0], cols = w.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef double q = <double> qmax, si
    with nogil:
        for i in range(rows):
            si = <double> s[i]
            for j in range(cols):
                out[i, j] = <float> (_round_clamp((<double> w[i, j]) / si, q) * si)
    return out_arr


def embedding_bag_fq(weight, indices, offsets,
                     double scale, long qmax):
    cdef const float[:, ::1] w = np.ascontiguousarray(weight, dtype=np.float32)
    cdef const long long[::1] idx = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const long long[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t b, n, j, r, n_bags = offs.shape[0] - 1, dim = w.shape[1]
    out_arr = np.zeros((n_bags, dim), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef double q = <double> qmax
    with nogil:
        for b in range(n_bags):
            for n in range(offs[b], offs[b + 1]):
                r = <Py_ssize_t> idx[n]
                for j in range(dim):
                    out[b, j] += <float> (_round_clamp((<double> w[r, j]) / scale, q) * scale)
    return out_arr


def embedding_bag(weight, indices, offsets):
    if weight.dtype != np.float32:
        # float64 bypass path is not performance-critical; reuse the fallback
        from . import _py
        return _py.embedding_bag(weight, indices, offsets)
    cdef const float[:, ::1] w = np.ascontiguousarray(weight, dtype=np.float32)
    cdef const long long[::1] idx = np.ascontiguousarray(indices, dtype=np.int64)
    cdef const long long[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t b, n, j, r, n_bags = offs.shape[0] - 1, dim = w.shape[1]
    out_arr = np.zeros((n_bags, dim), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    with nogil:
        for b in range(n_bags):
            for n in range(offs[b], offs[b + 1]):
                r = <Py_ssize_t> idx[n]
                for j in range(dim):
                    out[b, j] += w[r, j]
    return out_arr


def pack_int4(codes):
    cdef const int[::1] c = np.ascontiguousarray(codes, dtype=np.int32).ravel()
    cdef Py_ssize_t i, n = c.shape[0], n_bytes = (n + 1) // 2
    out_arr = np.zeros(n_bytes, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    cdef unsigned char lo, hi
    with nogil:
        for i in range(n_bytes):
            lo = <unsigned char> (c[2 * i] + 8)
            hi = <unsigned char> (c[2 * i + 1] + 8) if 2 * i + 1 < n else 0
            out[i] = lo | (hi << 4)
    return out_arr.tobytes()


def unpack_int4(data, long long count):
    cdef const unsigned char[::1] raw = np.frombuffer(data, dtype=np.uint8)
    cdef Py_ssize_t i, n = count
    out_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] out = out_arr
    with nogil:
        for i in range(n):
            if i % 2 == 0:
                out[i] = <int> (raw[i // 2] & 0x0F) - 8
            else:
                out[i] = <int> (raw[i // 2] >> 4) - 8
    return out_arr
