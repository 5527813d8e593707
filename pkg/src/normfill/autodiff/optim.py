from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient
    are left untouched (their moments do not decay either)."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.data.dtype)
