# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for bilinear homography warping and im2col.

Arithmetic order mirrors ``ptlane._fallback`` so both backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

cdef double W_EPS = 1e-12


def warp_forward(const double[:, :, ::1] src, const double[:, ::1] hinv, double orientation,
                 Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    out_arr = np.zeros((C, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t y, x, c, x0, y0
    cdef double a, b, w, sx, sy, fx, fy, w00, w01, w10, w11, acc
    cdef bint in00, in01, in10, in11
    for y in range(out_h):
        for x in range(out_w):
            w = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
            if orientation * w <= W_EPS:
                continue
            a = hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]
            b = hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]
            sx = a / w
            sy = b / w
            if not (sx > -1.0 and sx < W and sy > -1.0 and sy < H):
                continue
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            fx = sx - x0
            fy = sy - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            in00 = x0 >= 0 and y0 >= 0
            in01 = x0 + 1 < W and y0 >= 0
            in10 = x0 >= 0 and y0 + 1 < H
            in11 = x0 + 1 < W and y0 + 1 < H
            for c in range(C):
                acc = 0.0
                if in00:
                    acc = acc + w00 * src[c, y0, x0]
                if in01:
                    acc = acc + w01 * src[c, y0, x0 + 1]
                if in10:
                    acc = acc + w10 * src[c, y0 + 1, x0]
                if in11:
                    acc = acc + w11 * src[c, y0 + 1, x0 + 1]
                out[c, y, x] = acc
    return out_arr


def warp_backward(const double[:, :, ::1] grad, const double[:, ::1] hinv, double orientation,
                  Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t C = grad.shape[0], out_h = grad.shape[1], out_w = grad.shape[2]
    cdef Py_ssize_t H = in_h, W = in_w
    res_arr = np.zeros((C, in_h, in_w), dtype=np.float64)
    cdef double[:, :, ::1] res = res_arr
    cdef Py_ssize_t y, x, c, x0, y0
    cdef double a, b, w, sx, sy, fx, fy, w00, w01, w10, w11, g
    cdef bint in00, in01, in10, in11
    for y in range(out_h):
        for x in range(out_w):
            w = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
            if orientation * w <= W_EPS:
                continue
            a = hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]
            b = hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]
            sx = a / w
            sy = b / w
            if not (sx > -1.0 and sx < W and sy > -1.0 and sy < H):
                continue
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            fx = sx - x0
            fy = sy - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            in00 = x0 >= 0 and y0 >= 0
            in01 = x0 + 1 < W and y0 >= 0
            in10 = x0 >= 0 and y0 + 1 < H
            in11 = x0 + 1 < W and y0 + 1 < H
            for c in range(C):
                g = grad[c, y, x]
                if in00:
                    res[c, y0, x0] += w00 * g
                if in01:
                    res[c, y0, x0 + 1] += w01 * g
                if in10:
                    res[c, y0 + 1, x0] += w10 * g
                if in11:
                    res[c, y0 + 1, x0 + 1] += w11 * g
    return res_arr


def im2col(const double[:, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad,
           Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cols_arr = np.zeros((C * k * k, out_h * out_w), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, row
    for c in range(C):
        for i in range(k):
            for j in range(k):
                row = (c * k + i) * k + j
                for oy in range(out_h):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= H:
                        continue
                    for ox in range(out_w):
                        ix = ox * stride + j - pad
                        if ix >= 0 and ix < W:
                            cols[row, oy * out_w + ox] = x[c, iy, ix]
    return cols_arr


def col2im(const double[:, ::1] cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W, Py_ssize_t k,
           Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t out_h, Py_ssize_t out_w):
    res_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] res = res_arr
    cdef Py_ssize_t c, i, j, oy, ox, iy, ix, row
    for c in range(C):
        for i in range(k):
            for j in range(k):
                row = (c * k + i) * k + j
                for oy in range(out_h):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= H:
                        continue
                    for ox in range(out_w):
                        ix = ox * stride + j - pad
                        if ix >= 0 and ix < W:
                            res[c, iy, ix] += cols[row, oy * out_w + ox]
    return res_arr
