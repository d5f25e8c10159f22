"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Param


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Iterable[Param]) -> None:
    """Apply one Adam update in place and zero the gradients afterwards."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        g = p.grad
        m = state.m.get(p.id)
        if m is None:
            m = state.m[p.id] = np.zeros_like(p.data)
            state.v[p.id] = np.zeros_like(p.data)
        v = state.v[p.id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()
