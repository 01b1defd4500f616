from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import InvariantError, ParamStore


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """Bias-corrected Adam update of every trainable parameter, in place.

    Raises InvariantError if a trainable parameter has no gradient. Masked-out
    entries keep their values bitwise. Gradients are cleared afterwards.
    """
    names = params.trainable()
    for name in names:
        if params[name].grad is None:
            raise InvariantError(f"missing gradient for trainable parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in names:
        t = params[name]
        g = t.grad
        mask = params.mask(name)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        m = state.m.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if mask is not None:
            t.values = np.where(mask, t.values - update, t.values)
        else:
            t.values = t.values - update
    params.zero_grad()
    return params
