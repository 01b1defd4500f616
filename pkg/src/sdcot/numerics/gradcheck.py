from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    pass


def grad_check(fn, point, step=1e-5, names=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn(point)`` must return a scalar Tensor built from the tensors in the
    ParamStore ``point``. The error per entry is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    names = list(names) if names is not None else point.trainable()
    point.zero_grad()
    out = fn(point)
    if not np.isfinite(out.values).all():
        raise NumericError("function is not finite at the check point")
    out.backward()
    worst = 0.0
    for name in names:
        t = point[name]
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.values.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(point).values)
            flat[i] = orig - step
            lo = float(fn(point).values)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite evaluation while perturbing {name}[{i}]")
            numeric[i] = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    point.zero_grad()
    return worst
