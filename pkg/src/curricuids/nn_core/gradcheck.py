"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteValue
from .tensor import Param, Tape, Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
               n_probes: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. With
    ``n_probes`` set, that many parameter elements are sampled (seeded)
    instead of sweeping every element.

    The denominator is ``max(|analytic|, |numeric|, floor)``. Central
    differences carry roundoff near ``eps * |loss| / h`` (about 1e-11 here),
    so gradients below ``floor`` are effectively held to an absolute bound.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteValue("loss is not finite at the probe point")
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if n_probes is None or n_probes >= total:
        probes = np.arange(total)
    else:
        probes = np.sort(np.random.default_rng(seed).choice(total, size=n_probes, replace=False))

    worst = 0.0
    for flat in probes:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[k])
        p = params[k]
        old = p.data.flat[i]
        p.data.flat[i] = old + h
        fp = float(f().data)
        p.data.flat[i] = old - h
        fm = float(f().data)
        p.data.flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteValue(f"non-finite loss while probing {p.name}[{i}]")
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic[k].flat[i])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
