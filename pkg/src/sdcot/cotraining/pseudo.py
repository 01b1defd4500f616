"""Pseudo-label generation from the frozen base model and label mixing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..detector import decode_arrays
from ..geometry import Box3D, boxes_to_array, iou_matrix, nms_arrays
from ..numerics import InvariantError


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau_o: float = 0.95
    tau_c: float = 0.90
    pre_nms_iou: float = 0.25

    def __post_init__(self):
        for name in ("tau_o", "tau_c", "pre_nms_iou"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


def pseudo_labels_from_proposals(props, mean_size, nh, cfg: PseudoLabelConfig):
    """Per-cloud pseudo boxes: NMS first, then both confidence thresholds."""
    boxes, obj, cls = decode_arrays(props, mean_size, nh)
    label = cls.argmax(axis=1)
    cprob = cls.max(axis=1)
    score = obj * cprob
    K = props.n_proposals
    out = []
    for b in range(props.batch_size):
        sl = slice(b * K, (b + 1) * K)
        keep = nms_arrays(boxes[sl], score[sl], cfg.pre_nms_iou)
        picked = []
        for i in keep:
            j = b * K + int(i)
            if obj[j] >= cfg.tau_o and cprob[j] >= cfg.tau_c:
                picked.append(Box3D.from_array(boxes[j], int(label[j]), float(score[j]), pseudo=True))
        out.append(picked)
    return out


def generate_pseudo_labels(static_teacher, points, cfg: PseudoLabelConfig, rng):
    """Pseudo boxes for one cloud ([N, 3]) or a batch ([B, N, 3])."""
    props, _ = static_teacher.forward(points, rng)
    labels = pseudo_labels_from_proposals(props, static_teacher.mean_size, static_teacher.cfg.heading_bins, cfg)
    return labels[0] if np.ndim(points) == 2 else labels


@dataclass
class MixedLabels:
    pseudo_boxes: list = field(default_factory=list)
    gt_boxes: list = field(default_factory=list)

    @property
    def boxes(self):
        return list(self.pseudo_boxes) + list(self.gt_boxes)

    def arrays(self):
        boxes = self.boxes
        return boxes_to_array(boxes), np.array([b.class_id for b in boxes], dtype=np.int64)


def mix_labels(pseudo, novel_gt, dedupe_iou=0.5, replay_gt=()):
    """Union of pseudo base-class boxes and ground truth.

    Pseudo boxes overlapping any ground-truth box by more than
    ``dedupe_iou`` are dropped (``dedupe_iou=None`` keeps them all).
    ``replay_gt`` holds replayed base-class annotations, which may share class
    ids with the pseudo boxes.
    """
    pseudo = [b if b.pseudo else b.with_(pseudo=True) for b in pseudo]
    novel_gt = [b.with_(pseudo=False) if b.pseudo else b for b in novel_gt]
    replay_gt = [b.with_(pseudo=False) if b.pseudo else b for b in replay_gt]
    overlap = {b.class_id for b in pseudo} & {b.class_id for b in novel_gt}
    if overlap:
        raise InvariantError(f"pseudo and novel ground-truth classes overlap: {sorted(overlap)}")
    gt = novel_gt + replay_gt
    if pseudo and gt and dedupe_iou is not None:
        ious = iou_matrix(boxes_to_array(pseudo), boxes_to_array(gt))
        pseudo = [b for b, row in zip(pseudo, ious) if row.max() <= dedupe_iou]
    return MixedLabels(pseudo, gt)
