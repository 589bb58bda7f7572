# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im / max-pool kernels (float32 and float64)."""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] xp, real[:, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
            Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ci, ky, kx, ni, oy, ox, row, col0, iy
    with nogil:
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    row = (ci * kh + ky) * kw + kx
                    for ni in range(n):
                        col0 = ni * oh * ow
                        for oy in range(oh):
                            iy = oy * stride + ky
                            for ox in range(ow):
                                cols[row, col0 + oy * ow + ox] = xp[ni, ci, iy, ox * stride + kx]


def im2col(xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow):
    xp = np.ascontiguousarray(xp)
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * oh * ow), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, stride, oh, ow)
    return cols


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] dxp,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
            Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = dxp.shape[0], c = dxp.shape[1]
    cdef Py_ssize_t ci, ky, kx, ni, oy, ox, row, col0, iy
    with nogil:
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    row = (ci * kh + ky) * kw + kx
                    for ni in range(n):
                        col0 = ni * oh * ow
                        for oy in range(oh):
                            iy = oy * stride + ky
                            for ox in range(ow):
                                dxp[ni, ci, iy, ox * stride + kx] += cols[row, col0 + oy * ow + ox]


def col2im(cols, xp_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow):
    cols = np.ascontiguousarray(cols)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    _col2im(cols, dxp, kh, kw, stride, oh, ow)
    return dxp


def _maxpool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                 cnp.int64_t[:, :, :, ::1] arg,
                 Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t ni, ci, oy, ox, y0, x0, y, xx, y1, x1, besti
    cdef real best, v
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    y0 = oy * stride
                    y1 = min(y0 + k, h)
                    for ox in range(ow):
                        x0 = ox * stride
                        x1 = min(x0 + k, w)
                        best = x[ni, ci, y0, x0]
                        besti = y0 * w + x0
                        for y in range(y0, y1):
                            for xx in range(x0, x1):
                                v = x[ni, ci, y, xx]
                                if v > best:
                                    best = v
                                    besti = y * w + xx
                        out[ni, ci, oy, ox] = best
                        arg[ni, ci, oy, ox] = besti


def maxpool_forward(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t oh, Py_ssize_t ow):
    x = np.ascontiguousarray(x)
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    _maxpool_fwd(x, out, arg, k, stride)
    return out, arg


def _maxpool_bwd(const real[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] arg,
                 real[:, :, ::1] dx):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], oh = dout.shape[2], ow = dout.shape[3]
    cdef Py_ssize_t ni, ci, oy, ox
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        dx[ni * c + ci, 0, arg[ni, ci, oy, ox]] += dout[ni, ci, oy, ox]


def maxpool_backward(dout, argmax, x_shape):
    dout = np.ascontiguousarray(dout)
    argmax = np.ascontiguousarray(argmax, dtype=np.int64)
    n, c, h, w = x_shape
    dx = np.zeros((n * c, 1, h * w), dtype=dout.dtype)
    _maxpool_bwd(dout, argmax, dx)
    return dx.reshape(x_shape)
