"""Supervised, distillation and consistency objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..detector import SIZE_EPS, heading_encode
from ..numerics import Tensor
from ..numerics import ops as T


@dataclass
class LossWeights:
    lambda_s: float = 10.0
    lambda_d: float = 1.0
    lambda_c: float = 10.0
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 0.2
    ramp_up_epochs: int = 30

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


def supervised_loss(p, assignment, mean_size, nh, weights: LossWeights = LossWeights()):
    """Vote, objectness, box and semantic terms; returns ``(total, breakdown)``.

    Regression terms are Huber (delta 1) averaged over positive proposals (or
    masked seeds for the vote term) and vanish when there are none.
    """
    a = assignment
    pos = a.positive.astype(np.float64)
    valid = (a.objectness >= 0).astype(np.float64)
    n = len(pos)
    if len(a.gt_boxes):
        tgt = a.gt_boxes[a.matched]
        tgt_cls = a.gt_classes[a.matched]
    else:
        tgt = np.tile(np.r_[0.0, 0.0, 0.0, mean_size, 0.0], (n, 1))
        tgt_cls = np.zeros(n, dtype=np.int64)

    vote = T.huber(p.vote_positions, Tensor(a.vote_target), weights=a.vote_mask.astype(np.float64))
    obj = T.cross_entropy(p.objectness_logits, np.maximum(a.objectness, 0), weights=valid)
    center = T.huber(p.center, Tensor(tgt[:, :3]), weights=pos)
    size_t = np.log(np.maximum(tgt[:, 3:6], SIZE_EPS) / np.asarray(mean_size))
    size = T.huber(p.size_offsets, Tensor(size_t), weights=pos)
    bins, resid = heading_encode(tgt[:, 6], nh)
    angle_cls = T.cross_entropy(p.heading_scores[:, :nh], bins, weights=pos)
    angle_reg = T.huber(p.heading_scores[np.arange(n), nh + bins], Tensor(resid), weights=pos)
    sem = T.cross_entropy(p.class_logits, tgt_cls, weights=pos)

    box = center + 0.1 * angle_cls + angle_reg + size
    total = vote + weights.lambda1 * obj + weights.lambda2 * box + weights.lambda3 * sem
    parts = {
        "vote": vote, "objectness": obj, "center": center, "angle_cls": angle_cls,
        "angle_reg": angle_reg, "size": size, "semantic": sem, "box": box,
    }
    return total, {k: float(v.values) for k, v in parts.items()}


@dataclass(frozen=True)
class DistillVariant:
    targets: frozenset = frozenset({"class_logits"})
    loss_fn: str = "l2_normalized"
    temperature: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))
        if not self.targets or not self.targets <= {"class_logits", "center", "size"}:
            raise ValueError(f"invalid distillation targets {sorted(self.targets)}")
        if self.loss_fn not in ("l2_normalized", "cross_entropy", "kd_temperature"):
            raise ValueError(f"unknown distillation loss {self.loss_fn!r}")


DEFAULT_VARIANT = DistillVariant()


def _logit_distill(student, teacher, variant):
    if variant.loss_fn == "l2_normalized":
        s = T.sub(student, T.mean(student, axis=1, keepdims=True))
        t = teacher - teacher.sum(axis=1, keepdims=True) * (1.0 / teacher.shape[1])
        d = T.sub(s, Tensor(t))
        return T.mean(T.sqrt(T.sum(T.square(d), axis=1)))
    if variant.loss_fn == "cross_entropy":
        return T.cross_entropy(student, teacher.argmax(axis=1))
    tau = variant.temperature
    z = teacher / tau
    q = np.exp(z - z.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    logp = T.log_softmax(T.mul(student, 1.0 / tau), axis=1)
    return T.mul(T.mean(T.sum(T.mul(logp, -q), axis=1)), tau * tau)


def distillation_loss(student_logits, teacher_logits, variant: DistillVariant = DEFAULT_VARIANT,
                      student_boxes=None, teacher_boxes=None):
    """Mean over aligned proposals of the gap between base-class responses.

    ``student_logits`` is the student's [K, |C_base|] slice and
    ``teacher_logits`` the static teacher's [K, |C_base|] array. With the
    default variant each row is centred over classes before taking the L2
    norm of the difference. ``student_boxes``/``teacher_boxes`` are
    ``(center, size)`` pairs for the centre/size targets.
    """
    student_logits = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    teacher = teacher_logits.values if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher.shape or student_logits.ndim != 2:
        raise ValueError(f"distillation needs matching [K, C] logits, got {student_logits.shape} and {teacher.shape}")
    loss = None
    if "class_logits" in variant.targets:
        loss = _logit_distill(student_logits, teacher, variant)
    for key, pos in (("center", 0), ("size", 1)):
        if key in variant.targets:
            if student_boxes is None or teacher_boxes is None:
                raise ValueError(f"{key} distillation needs decoded boxes")
            s, t = student_boxes[pos], np.asarray(teacher_boxes[pos])
            if s.shape != t.shape:
                raise ValueError("misaligned box distillation targets")
            term = T.mean(T.sum(T.square(T.sub(s, Tensor(t))), axis=1))
            loss = term if loss is None else loss + term
    return loss


def decoded_sizes(p, mean_size):
    """Differentiable mean_size * exp(size_offsets)."""
    return T.mul(T.exp(p.size_offsets), np.asarray(mean_size))


def consistency_loss(student_center, student_size, student_class_logits,
                     teacher_center, teacher_size, teacher_class_probs, batch_size):
    """Centre, class and size agreement between student and transformed teacher.

    Each student proposal is paired with the nearest teacher proposal (by
    centre, within the same cloud). Terms: mean squared centre distance,
    mean KL(teacher || student) over class distributions, mean squared size
    error; summed with equal weight.
    """
    n = student_center.shape[0]
    K = n // batch_size
    sc = student_center.values.reshape(batch_size, K, 3)
    tc = np.asarray(teacher_center).reshape(batch_size, -1, 3)
    Kt = tc.shape[1]
    d = np.linalg.norm(sc[:, :, None, :] - tc[:, None, :, :], axis=3)
    match = (d.argmin(axis=2) + np.arange(batch_size)[:, None] * Kt).reshape(-1)
    tc_m = np.asarray(teacher_center).reshape(-1, 3)[match]
    ts_m = np.asarray(teacher_size).reshape(-1, 3)[match]
    tp_m = np.asarray(teacher_class_probs).reshape(batch_size * Kt, -1)[match]
    center = T.mean(T.sum(T.square(T.sub(student_center, Tensor(tc_m))), axis=1))
    size = T.mean(T.sum(T.square(T.sub(student_size, Tensor(ts_m))), axis=1))
    logp_s = T.log_softmax(student_class_logits, axis=1)
    plogp = np.where(tp_m > 0, tp_m * np.log(np.where(tp_m > 0, tp_m, 1.0)), 0.0).sum(axis=1)
    kl = T.mean(T.sub(Tensor(plogp), T.sum(T.mul(logp_s, tp_m), axis=1)))
    total = center + kl + size
    return total, {"center": float(center.values), "class_kl": float(kl.values), "size": float(size.values)}
