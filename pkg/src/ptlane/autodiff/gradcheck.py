"""Central finite-difference checks of recorded backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor

STEP = 1e-6


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self):
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:.0e}): {parts}"


def _scalar(out: Tensor, projection: np.ndarray | None) -> float:
    if projection is None:
        return float(out.data.sum())
    return float(np.sum(out.data * projection))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_check(op, inputs: dict, tolerance: float = 1e-5, step: float = STEP,
                      projection_seed: int | None = 0, max_entries: int | None = None,
                      exclude=None, seed: int = 0, grad_hook=None) -> GradCheckReport:
    """Compare tape gradients of ``op(**inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection.  ``exclude``
    maps an input name to a boolean mask of entries to skip (kinks).
    ``max_entries`` samples that many entries per input.  ``grad_hook(name,
    grad)`` may alter the analytic gradient; it exists for mutation tests.
    """
    tensors = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
               for k, v in inputs.items()}
    for t in tensors.values():
        t.grad = None

    with Tape() as tape:
        out = op(**tensors)
    projection = None
    if out.data.size != 1 and projection_seed is not None:
        projection = np.random.default_rng(projection_seed).normal(size=out.shape)
    tape.backward(out, np.ones_like(out.data) if projection is None else projection)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in tensors.items():
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        flat_idx = np.arange(t.data.size)
        if exclude and name in exclude:
            flat_idx = flat_idx[~np.asarray(exclude[name]).ravel()]
        if max_entries is not None and len(flat_idx) > max_entries:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        view = t.data.reshape(-1)
        for n, i in enumerate(flat_idx):
            orig = view[i]
            view[i] = orig + step
            plus = _scalar(op(**tensors), projection)
            view[i] = orig - step
            minus = _scalar(op(**tensors), projection)
            view[i] = orig
            numeric[n] = (plus - minus) / (2.0 * step)
        report.errors[name] = relative_error(analytic.reshape(-1)[flat_idx], numeric)
    return report
