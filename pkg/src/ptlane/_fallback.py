"""Pure numpy implementations of the compiled kernels.

Forward warps and im2col/col2im evaluate in the same floating-point order
as ``_kernels.pyx``; the warp backward goes through a sparse matrix and
agrees with the compiled scatter to rounding only.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

W_EPS = 1e-12


def sampling_plan(hinv, orientation, in_h, in_w, out_h, out_w):
    """Neighbor indices and bilinear weights for every target pixel.

    Returns ``(idx, wts)`` of shape ``(4, out_h*out_w)``; invalid neighbors get
    index 0 and weight 0.
    """
    hinv = np.asarray(hinv, dtype=np.float64)
    ys, xs = np.meshgrid(np.arange(out_h, dtype=np.float64), np.arange(out_w, dtype=np.float64),
                         indexing="ij")
    xs = xs.ravel()
    ys = ys.ravel()
    w = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    a = hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]
    b = hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]
    front = orientation * w > W_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(front, a / np.where(front, w, 1.0), -2.0)
        sy = np.where(front, b / np.where(front, w, 1.0), -2.0)
    valid = front & (sx > -1.0) & (sx < in_w) & (sy > -1.0) & (sy < in_h)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    wts = np.stack([(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy])
    nx = np.stack([x0, x0 + 1, x0, x0 + 1])
    ny = np.stack([y0, y0, y0 + 1, y0 + 1])
    inside = valid & (nx >= 0) & (nx < in_w) & (ny >= 0) & (ny < in_h)
    idx = np.where(inside, ny * in_w + nx, 0)
    wts = np.where(inside, wts, 0.0)
    return idx, wts


@lru_cache(maxsize=64)
def _cached_plan(key, in_h, in_w, out_h, out_w):
    hinv = np.frombuffer(key[0], dtype=np.float64).reshape(3, 3)
    idx, wts = sampling_plan(hinv, key[1], in_h, in_w, out_h, out_w)
    n_out = out_h * out_w
    rows = np.tile(np.arange(n_out), 4)
    mat = sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n_out, in_h * in_w))
    return idx, wts, mat


def _plan(hinv, orientation, in_h, in_w, out_h, out_w):
    key = (np.ascontiguousarray(hinv, dtype=np.float64).tobytes(), float(orientation))
    return _cached_plan(key, in_h, in_w, out_h, out_w)


def warp_forward(src, hinv, orientation, out_h, out_w):
    C, H, W = src.shape
    idx, wts, _ = _plan(hinv, orientation, H, W, out_h, out_w)
    flat = src.reshape(C, H * W)
    acc = np.zeros((C, out_h * out_w))
    for k in range(4):
        acc = acc + wts[k] * flat[:, idx[k]]
    return acc.reshape(C, out_h, out_w)


def warp_backward(grad, hinv, orientation, in_h, in_w):
    C, out_h, out_w = grad.shape
    _, _, mat = _plan(hinv, orientation, in_h, in_w, out_h, out_w)
    res = np.asarray(mat.T @ grad.reshape(C, -1).T).T
    return np.ascontiguousarray(res).reshape(C, in_h, in_w)


def im2col(x, k, stride, pad, out_h, out_w):
    C = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, out_h, out_w))
    span_y = stride * (out_h - 1) + 1
    span_x = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + span_y:stride, j:j + span_x:stride]
    return cols.reshape(C * k * k, out_h * out_w)


def col2im(cols, C, H, W, k, stride, pad, out_h, out_w):
    # padded canvas large enough for every tap, cropped at the end
    hp = max(H + 2 * pad, stride * (out_h - 1) + k)
    wp = max(W + 2 * pad, stride * (out_w - 1) + k)
    xp = np.zeros((C, hp, wp))
    cols = cols.reshape(C, k, k, out_h, out_w)
    span_y = stride * (out_h - 1) + 1
    span_x = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            xp[:, i:i + span_y:stride, j:j + span_x:stride] += cols[:, i, j]
    return xp[:, pad:pad + H, pad:pad + W].copy()
