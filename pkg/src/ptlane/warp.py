"""Perspective transformer layer: bilinear inverse warping under a fixed homography.

The homography maps source pixels to target pixels.  Each target pixel pulls
its value from the source at ``H^-1 (x, y, 1)`` with bilinear weights; taps
outside the source, or rays behind the source camera, read zero.  The
operator is linear in the feature map, and :func:`warp_backward` is its exact
adjoint.

The compiled kernels in ``ptlane._kernels`` are used when importable; set
``PTLANE_BACKEND=python`` to force the numpy fallback.
"""
from __future__ import annotations

import math
import os

import numpy as np

from . import _fallback
from .errors import ShapeMismatch
from .geometry import CameraIntrinsics, Homography, ViewSpec

try:
    if os.environ.get("PTLANE_BACKEND", "").lower() in ("python", "numpy", "fallback"):
        raise ImportError("fallback forced by PTLANE_BACKEND")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled
BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name: str | None = None):
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}") from None


def _check_map(fm) -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeMismatch(f"feature map must be C x H x W, got shape {fm.shape}")
    return np.ascontiguousarray(fm)


def _inverse_matrix(h: Homography) -> np.ndarray:
    return np.ascontiguousarray(np.linalg.inv(h.matrix))


def warp_forward(fm, h: Homography, out_shape=None, backend=None) -> np.ndarray:
    """Warp a ``C x H x W`` map into the target viewport of ``h``."""
    fm = _check_map(fm)
    if h.source is not None and fm.shape[1:] != h.source.shape:
        raise ShapeMismatch(f"map is {fm.shape[1:]}, homography source is {h.source.shape}")
    if out_shape is None:
        if h.target is None:
            raise ShapeMismatch("homography has no target viewport; pass out_shape")
        out_shape = h.target.shape
    out_h, out_w = out_shape
    return get_backend(backend).warp_forward(fm, _inverse_matrix(h), float(h.orientation),
                                             int(out_h), int(out_w))


def warp_backward(grad_out, h: Homography, in_shape=None, backend=None) -> np.ndarray:
    """Adjoint of :func:`warp_forward`: pull a target-space gradient back to the source."""
    grad_out = _check_map(grad_out)
    if h.target is not None and grad_out.shape[1:] != h.target.shape:
        raise ShapeMismatch(f"gradient is {grad_out.shape[1:]}, homography target is {h.target.shape}")
    if in_shape is None:
        if h.source is None:
            raise ShapeMismatch("homography has no source viewport; pass in_shape")
        in_shape = h.source.shape
    in_h, in_w = in_shape[-2:]
    return get_backend(backend).warp_backward(grad_out, _inverse_matrix(h), float(h.orientation),
                                              int(in_h), int(in_w))


def _scale_view(view: ViewSpec | None, stride: int) -> ViewSpec | None:
    if view is None:
        return None
    k = view.intrinsics
    return ViewSpec(CameraIntrinsics(k.f / stride, k.cx / stride, k.cy / stride),
                    math.ceil(view.width / stride), math.ceil(view.height / stride))


def scale_homography_for_stride(h: Homography, stride: int) -> Homography:
    """Conjugate ``h`` by ``diag(1/s, 1/s, 1)`` for maps downsampled by ``stride``."""
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if stride == 1:
        return h
    s = np.diag([1.0 / stride, 1.0 / stride, 1.0])
    s_inv = np.diag([float(stride), float(stride), 1.0])
    return Homography.from_matrix(s @ h.matrix @ s_inv, _scale_view(h.source, stride),
                                  _scale_view(h.target, stride), h.orientation)
