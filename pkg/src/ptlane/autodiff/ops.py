"""Differentiable operators on ``C x H x W`` tensors."""
from __future__ import annotations

import numpy as np

from .. import warp as _warp
from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor, record


def _kernels():
    return _warp.get_backend()


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, in_ch: int,
                out_ch: int):
    if x.data.ndim != 3:
        raise ShapeMismatch(f"input must be C x H x W, got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeMismatch(f"weight must be square with an odd kernel, got {weight.shape}")
    if x.shape[0] != in_ch:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, weight expects {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeMismatch(f"bias must have shape ({out_ch},), got {bias.shape}")
    if int(stride) != stride or stride < 1:
        raise ShapeMismatch(f"stride must be a positive integer, got {stride}")


def conv_output_size(n: int, stride: int) -> int:
    return -(-n // stride)


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution (cross-correlation), output ``ceil(H/s) x ceil(W/s)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    c_out, c_in, k, _ = weight.shape
    _check_conv(x, weight, bias, stride, c_in, c_out)
    kern = _kernels()
    _, H, W = x.shape
    pad = (k - 1) // 2
    oh, ow = conv_output_size(H, stride), conv_output_size(W, stride)
    cols = kern.im2col(np.ascontiguousarray(x.data), k, stride, pad, oh, ow)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = Tensor(out.reshape(c_out, oh, ow))

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = np.ascontiguousarray(wmat.T @ g2)
        gx = kern.col2im(gcols, c_in, H, W, k, stride, pad, oh, ow)
        gb = g2.sum(axis=1) if bias is not None else None
        return gx, gw, gb

    return record("conv2d", (x, weight, bias), out, backward)


def conv2d_transpose(x, weight, bias=None, stride: int = 1, output_size=None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``weight``.

    Here ``weight`` is read as ``C_in x C_out x k x k``.  ``output_size`` may be
    any ``(H, W)`` whose strided convolution has the input's size; it
    defaults to ``stride`` times the input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    c_in, c_out, k, _ = weight.shape
    _check_conv(x, weight, bias, stride, c_in, c_out)
    kern = _kernels()
    _, h, w = x.shape
    if output_size is None:
        output_size = (h * stride, w * stride)
    H, W = (int(v) for v in output_size)
    if conv_output_size(H, stride) != h or conv_output_size(W, stride) != w:
        raise ShapeMismatch(f"output size {(H, W)} is not compatible with input {(h, w)} "
                            f"at stride {stride}")
    pad = (k - 1) // 2
    wmat = weight.data.reshape(c_in, -1)
    xmat = x.data.reshape(c_in, -1)
    cols = np.ascontiguousarray(wmat.T @ xmat)
    out = kern.col2im(cols, c_out, H, W, k, stride, pad, h, w)
    if bias is not None:
        out += bias.data[:, None, None]
    out = Tensor(out)

    def backward(g):
        gcols = kern.im2col(np.ascontiguousarray(g), k, stride, pad, h, w)
        gx = (wmat @ gcols).reshape(x.shape)
        gw = (xmat @ gcols.T).reshape(weight.shape)
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return gx, gw, gb

    return record("conv2d_transpose", (x, weight, bias), out, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return record("relu", (x,), out, lambda g: (g * mask,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")
    return record("add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return record("scale", (a,), Tensor(a.data * factor), lambda g: (g * factor,))


def total(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)
    return record("sum", (a,), Tensor(a.data.sum()), lambda g: (np.full(a.shape, float(g)),))


def inner(a, weights) -> Tensor:
    """``sum(a * weights)`` for a constant array ``weights``."""
    a = as_tensor(a)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != a.shape:
        raise ShapeMismatch(f"weights {weights.shape} do not match {a.shape}")
    return record("inner", (a,), Tensor(np.sum(a.data * weights)),
                  lambda g: (weights * float(g),))


def warp(x, h, backend=None) -> Tensor:
    """Perspective transformer layer; gradients flow to ``x`` only."""
    x = as_tensor(x)
    out = Tensor(_warp.warp_forward(x.data, h, backend=backend))
    in_shape = x.shape[1:]
    return record("warp", (x,), out,
                  lambda g: (_warp.warp_backward(g, h, in_shape, backend=backend),))
