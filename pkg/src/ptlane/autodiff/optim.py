"""Adam with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 4e-5
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Update ``params`` (name -> array or Tensor) in place and advance ``state``.

    Missing gradients are treated as zero.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = grads.get(name)
        g = np.zeros_like(arr) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, expected {arr.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(arr)
            v = np.zeros_like(arr)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        arr -= state.lr * (update + state.weight_decay * arr)
    return state
