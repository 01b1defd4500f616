from __future__ import annotations

import math
from dataclasses import dataclass

from ..numerics import InvariantError, ParamStore


def ramp_up_weight(epoch, ramp_up_epochs, max_weight):
    """``max_weight * exp(-5 (1 - t)^2)`` with ``t = min(epoch / ramp_up_epochs, 1)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if ramp_up_epochs <= 0:
        return float(max_weight)
    t = min(epoch / ramp_up_epochs, 1.0)
    return float(max_weight) * math.exp(-5.0 * (1.0 - t) ** 2)


@dataclass(frozen=True)
class EmaConfig:
    alpha_rampup: float = 0.99
    alpha_after: float = 0.999

    def __post_init__(self):
        for a in (self.alpha_rampup, self.alpha_after):
            if not 0.0 <= a < 1.0:
                raise ValueError("EMA decay must lie in [0, 1)")

    def alpha(self, epoch, ramp_up_epochs):
        return self.alpha_rampup if epoch < ramp_up_epochs else self.alpha_after


def ema_update(teacher: ParamStore, student: ParamStore, alpha) -> ParamStore:
    """In-place ``teacher <- alpha * teacher + (1 - alpha) * student``."""
    if teacher.names() != student.names():
        raise InvariantError("teacher and student parameter names differ")
    for name in teacher.names():
        t, s = teacher[name], student[name]
        if t.shape != s.shape:
            raise InvariantError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.values = alpha * t.values + (1.0 - alpha) * s.values
    return teacher

