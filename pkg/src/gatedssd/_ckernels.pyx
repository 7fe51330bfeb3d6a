# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels. Mirrors gatedssd._pykernels exactly in contract."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const float[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n_, c_, i, j, oy, ox, row
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t iy, ix
    out = np.zeros((N, C * kh * kw, OH * OW), dtype=np.float32)
    cdef float[:, :, ::1] cols = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c_ * kh + i) * kw + j
                        for oy in range(OH):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(OW):
                                ix = ox * sw + j - pw
                                if ix >= 0 and ix < W:
                                    cols[n_, row, oy * OW + ox] = x[n_, c_, iy, ix]
    return out


def col2im(const float[:, :, ::1] cols, int N, int C, int H, int W,
           int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n_, c_, i, j, oy, ox, row, iy, ix
    cdef Py_ssize_t OH = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, C, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] dx = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c_ * kh + i) * kw + j
                        for oy in range(OH):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(OW):
                                ix = ox * sw + j - pw
                                if ix >= 0 and ix < W:
                                    dx[n_, c_, iy, ix] += cols[n_, row, oy * OW + ox]
    return out


def depthwise_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                      const float[::1] b, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t mult = O // C
    cdef Py_ssize_t OH = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t n_, o, c_, i, j, oy, ox, iy, ix
    cdef float acc
    out = np.empty((N, O, OH, OW), dtype=np.float32)
    cdef float[:, :, :, ::1] y = out
    with nogil:
        for n_ in range(N):
            for o in range(O):
                c_ = o // mult
                for oy in range(OH):
                    for ox in range(OW):
                        acc = 0.0
                        for i in range(kh):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for j in range(kw):
                                ix = ox * sw + j - pw
                                if ix >= 0 and ix < W:
                                    acc = acc + w[o, 0, i, j] * x[n_, c_, iy, ix]
                        y[n_, o, oy, ox] = acc + b[o]
    return out


def depthwise_backward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                       const float[:, :, :, ::1] dy, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t mult = O // C
    cdef Py_ssize_t OH = dy.shape[2], OW = dy.shape[3]
    cdef Py_ssize_t n_, o, c_, i, j, oy, ox, iy, ix
    cdef float g
    dx_arr = np.zeros((N, C, H, W), dtype=np.float32)
    dw_arr = np.zeros((O, 1, kh, kw), dtype=np.float32)
    cdef float[:, :, :, ::1] dx = dx_arr
    cdef float[:, :, :, ::1] dw = dw_arr
    with nogil:
        for n_ in range(N):
            for o in range(O):
                c_ = o // mult
                for oy in range(OH):
                    for ox in range(OW):
                        g = dy[n_, o, oy, ox]
                        for i in range(kh):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for j in range(kw):
                                ix = ox * sw + j - pw
                                if ix >= 0 and ix < W:
                                    dw[o, 0, i, j] += g * x[n_, c_, iy, ix]
                                    dx[n_, c_, iy, ix] += g * w[o, 0, i, j]
    return dx_arr, dw_arr
