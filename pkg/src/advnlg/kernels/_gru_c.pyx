# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled GRU gate kernels.

Gate layout along the last axis of the pre-activations is [reset | update | candidate].
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def gru_gates_forward(const double[:, ::1] gx, const double[:, ::1] gh, const double[:, ::1] h):
    cdef Py_ssize_t b = h.shape[0]
    cdef Py_ssize_t H = h.shape[1]
    cdef Py_ssize_t i, j
    cdef double r, z, n
    out_arr = np.empty((b, H), dtype=np.float64)
    cache_arr = np.empty((b, 3 * H), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] cache = cache_arr
    with nogil:
        for i in range(b):
            for j in range(H):
                r = _sigmoid(gx[i, j] + gh[i, j])
                z = _sigmoid(gx[i, H + j] + gh[i, H + j])
                n = tanh(gx[i, 2 * H + j] + r * gh[i, 2 * H + j])
                out[i, j] = (1.0 - z) * n + z * h[i, j]
                cache[i, j] = r
                cache[i, H + j] = z
                cache[i, 2 * H + j] = n
    return out_arr, cache_arr


def gru_gates_backward(const double[:, ::1] dout, const double[:, ::1] gh,
                       const double[:, ::1] h, const double[:, ::1] cache):
    cdef Py_ssize_t b = h.shape[0]
    cdef Py_ssize_t H = h.shape[1]
    cdef Py_ssize_t i, j
    cdef double r, z, n, g, dan, daz, dar
    dgx_arr = np.empty((b, 3 * H), dtype=np.float64)
    dgh_arr = np.empty((b, 3 * H), dtype=np.float64)
    dh_arr = np.empty((b, H), dtype=np.float64)
    cdef double[:, ::1] dgx = dgx_arr
    cdef double[:, ::1] dgh = dgh_arr
    cdef double[:, ::1] dh = dh_arr
    with nogil:
        for i in range(b):
            for j in range(H):
                r = cache[i, j]
                z = cache[i, H + j]
                n = cache[i, 2 * H + j]
                g = dout[i, j]
                dh[i, j] = g * z
                dan = g * (1.0 - z) * (1.0 - n * n)
                daz = g * (h[i, j] - n) * z * (1.0 - z)
                dar = dan * gh[i, 2 * H + j] * r * (1.0 - r)
                dgx[i, j] = dar
                dgh[i, j] = dar
                dgx[i, H + j] = daz
                dgh[i, H + j] = daz
                dgx[i, 2 * H + j] = dan
                dgh[i, 2 * H + j] = dan * r
    return dgx_arr, dgh_arr, dh_arr
