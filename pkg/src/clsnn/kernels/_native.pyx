# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scalar kernels for conv2d and maxpool2d.

Plain C loops with a fixed accumulation order, so results are reproducible
bit-for-bit run to run.  Inputs arrive pre-validated and C-contiguous from
the dispatcher in ``clsnn.kernels``.
"""

import numpy as np


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   int stride, int pad):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t nf = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t out_h = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t out_w = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((nb, nf, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t b, f, oh, ow, c, kh, kw, ih, iw
    cdef double acc
    for b in range(nb):
        for f in range(nf):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for c in range(nc):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if 0 <= iw < wd:
                                    acc += x[b, c, ih, iw] * w[f, c, kh, kw]
                    yv[b, f, oh, ow] = acc
    return y


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t nf = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t out_h = gy.shape[2], out_w = gy.shape[3]
    gx = np.zeros((nb, nc, h, wd), dtype=np.float64)
    gw = np.zeros((nf, nc, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw
    cdef Py_ssize_t b, f, oh, ow, c, kh, kw, ih, iw
    cdef double g
    for b in range(nb):
        for f in range(nf):
            for oh in range(out_h):
                for ow in range(out_w):
                    g = gy[b, f, oh, ow]
                    if g == 0.0:
                        continue
                    for c in range(nc):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if 0 <= iw < wd:
                                    gxv[b, c, ih, iw] += g * w[f, c, kh, kw]
                                    gwv[f, c, kh, kw] += g * x[b, c, ih, iw]
    return gx, gw


def maxpool2d_forward(const double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t out_h = h // k, out_w = wd // k
    y = np.empty((nb, nc, out_h, out_w), dtype=np.float64)
    idx = np.empty((nb, nc, out_h, out_w), dtype=np.int64)
    cdef double[:, :, :, ::1] yv = y
    cdef long long[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, c, oh, ow, kh, kw, best
    cdef double val, top
    for b in range(nb):
        for c in range(nc):
            for oh in range(out_h):
                for ow in range(out_w):
                    top = x[b, c, oh * k, ow * k]
                    best = 0
                    for kh in range(k):
                        for kw in range(k):
                            val = x[b, c, oh * k + kh, ow * k + kw]
                            # strict > keeps the first (lowest-index) maximum
                            if val > top:
                                top = val
                                best = kh * k + kw
                    yv[b, c, oh, ow] = top
                    iv[b, c, oh, ow] = best
    return y, idx


def maxpool2d_backward(const double[:, :, :, ::1] gy, const long long[:, :, :, ::1] idx,
                       x_shape, int k):
    cdef Py_ssize_t nb = x_shape[0], nc = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t out_h = h // k, out_w = wd // k
    gx = np.zeros((nb, nc, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t b, c, oh, ow, best
    for b in range(nb):
        for c in range(nc):
            for oh in range(out_h):
                for ow in range(out_w):
                    best = idx[b, c, oh, ow]
                    gxv[b, c, oh * k + best // k, ow * k + best % k] += gy[b, c, oh, ow]
    return gx
