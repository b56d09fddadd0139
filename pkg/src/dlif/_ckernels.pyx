# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for float64 NCHW tensors.

Loop order in col2im matches the numpy fallback (kernel offset outermost), so
both backends accumulate every output element in the same order and agree
bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.empty((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col, y0, x0
    for b in range(n):
        for y in range(oh):
            y0 = y * stride
            for xx in range(ow):
                x0 = xx * stride
                row = (b * oh + y) * ow + xx
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[row, col] = x[b, ch, y0 + i, x0 + j]
                            col += 1
    return out_arr


def col2im(const double[:, ::1] cols, tuple shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    dx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    col = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for xx in range(ow):
                            row = (b * oh + y) * ow + xx
                            dx[b, ch, y * stride + i, xx * stride + j] += cols[row, col]
    return dx_arr
