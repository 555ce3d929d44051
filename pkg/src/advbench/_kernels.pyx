# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Mirrors ``advbench._kernels_py``. Accumulators are C doubles.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w):
    cdef Py_ssize_t n_batch = x.shape[0], n_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t n_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = wd - kw + 1
    cdef Py_ssize_t n, o, c, ki, kj, i, j
    cdef double wv
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, n_out, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out_v = out
    cdef double[:, ::1] acc = np.empty((ho, wo), dtype=np.float64)
    with nogil:
        for n in range(n_batch):
            for o in range(n_out):
                acc[:, :] = 0.0
                for c in range(n_in):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, c, ki, kj]
                            for i in range(ho):
                                for j in range(wo):
                                    acc[i, j] += x[n, c, i + ki, j + kj] * wv
                for i in range(ho):
                    for j in range(wo):
                        out_v[n, o, i, j] = <floating>acc[i, j]
    return out


def conv2d_backward_input(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] w, Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t n_batch = gout.shape[0], n_out = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t n_in = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n, o, c, ki, kj, i, j
    cdef double wv
    dtype = np.float32 if floating is float else np.float64
    gx = np.empty((n_batch, n_in, in_h, in_w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx_v = gx
    cdef double[:, ::1] acc = np.empty((in_h, in_w), dtype=np.float64)
    with nogil:
        for n in range(n_batch):
            for c in range(n_in):
                acc[:, :] = 0.0
                for o in range(n_out):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, c, ki, kj]
                            for i in range(ho):
                                for j in range(wo):
                                    acc[i + ki, j + kj] += gout[n, o, i, j] * wv
                for i in range(in_h):
                    for j in range(in_w):
                        gx_v[n, c, i, j] = <floating>acc[i, j]
    return gx


def conv2d_backward_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gout, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n_batch = x.shape[0], n_in = x.shape[1]
    cdef Py_ssize_t n_out = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t n, o, c, ki, kj, i, j
    cdef double s
    dtype = np.float32 if floating is float else np.float64
    cdef double[:, :, :, ::1] acc = np.zeros((n_out, n_in, kh, kw), dtype=np.float64)
    # per-column partial sums keep the inner loop free of a serial dependency
    cdef double[::1] col = np.empty(wo, dtype=np.float64)
    with nogil:
        for n in range(n_batch):
            for o in range(n_out):
                for c in range(n_in):
                    for ki in range(kh):
                        for kj in range(kw):
                            col[:] = 0.0
                            for i in range(ho):
                                for j in range(wo):
                                    col[j] += gout[n, o, i, j] * x[n, c, i + ki, j + kj]
                            s = 0.0
                            for j in range(wo):
                                s = s + col[j]
                            acc[o, c, ki, kj] += s
    return np.asarray(acc).astype(dtype)


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    cdef Py_ssize_t n, c, i, j, k
    cdef floating best, v
    cdef signed char arg
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, n_ch, ho, wo), dtype=dtype)
    idx = np.empty((n_batch, n_ch, ho, wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] out_v = out
    cdef signed char[:, :, :, ::1] idx_v = idx
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        best = x[n, c, 2 * i, 2 * j]
                        arg = 0
                        for k in range(1, 4):
                            v = x[n, c, 2 * i + k // 2, 2 * j + k % 2]
                            if v > best:
                                best = v
                                arg = <signed char>k
                        out_v[n, c, i, j] = best
                        idx_v[n, c, i, j] = arg
    return out, idx


def maxpool2x2_backward(floating[:, :, :, ::1] gout, signed char[:, :, :, ::1] idx, Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t n_batch = gout.shape[0], n_ch = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t n, c, i, j, k
    dtype = np.float32 if floating is float else np.float64
    gx = np.zeros((n_batch, n_ch, in_h, in_w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx_v = gx
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        k = idx[n, c, i, j]
                        gx_v[n, c, 2 * i + k // 2, 2 * j + k % 2] = gout[n, c, i, j]
    return gx
