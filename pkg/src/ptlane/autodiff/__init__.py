"""Minimal reverse-mode differentiation for the toy segmentation network."""
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import IGNORE_INDEX, discriminative_loss, softmax_cross_entropy
from .ops import add, conv2d, conv2d_transpose, inner, relu, scale, total, warp
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor

__all__ = [
    "AdamState", "GradCheckReport", "IGNORE_INDEX", "Tape", "Tensor", "adam_step", "add",
    "conv2d", "conv2d_transpose", "discriminative_loss", "finite_diff_check", "inner", "relu",
    "scale", "softmax_cross_entropy", "total", "warp",
]
