"""Base training, co-teaching steps, incremental baselines/ablations, sequential rounds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..data import draw_augmentation, gt_arrays, subsample_cloud
from ..detector import Detector, DetectorConfig, assign_targets, decode_arrays, init_params
from ..geometry import boxes_to_array
from ..numerics import AdamState, adam_step
from ..numerics import ops as T
from .losses import (
    DEFAULT_VARIANT,
    DistillVariant,
    LossWeights,
    consistency_loss,
    decoded_sizes,
    distillation_loss,
    supervised_loss,
)
from .pseudo import PseudoLabelConfig, mix_labels, pseudo_labels_from_proposals
from .schedule import EmaConfig, ema_update, ramp_up_weight

log = logging.getLogger(__name__)

MODES = ("base", "joint", "finetune", "freeze_add", "sdcot", "sdcot_no_dis", "sdcot_no_con", "sdcot_no_both")
INCREMENTAL_MODES = MODES[2:]


@dataclass(frozen=True)
class ModeFlags:
    pseudo: bool
    distill: bool
    consistency: bool
    freeze_base: bool = False
    inference: str = "student"


MODE_FLAGS = {
    "finetune": ModeFlags(False, False, False),
    "freeze_add": ModeFlags(False, False, False, freeze_base=True),
    "sdcot": ModeFlags(True, True, True, inference="teacher"),
    "sdcot_no_dis": ModeFlags(True, False, True, inference="teacher"),
    "sdcot_no_con": ModeFlags(True, True, False),
    "sdcot_no_both": ModeFlags(True, False, False),
}


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_epochs: int = 40
    base_lr: float = 1e-3
    base_milestones: tuple = (28, 36)
    inc_epochs: int = 40
    inc_lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    distill: DistillVariant = DEFAULT_VARIANT
    dedupe_iou: float = 0.5


@dataclass
class Item:
    """One training sample: a scene plus its labels in detector class indices."""

    scene: object
    boxes: list
    replay: bool = False


def items_for(scenes, class_names, catalog_names, replay=False):
    """Wrap split scenes, remapping catalog class ids to detector indices."""
    index = {catalog_names.index(n): i for i, n in enumerate(class_names)}
    out = []
    for s in scenes:
        boxes = [b.with_(class_id=index[b.class_id]) for b in s.gt_boxes if b.class_id in index]
        out.append(Item(s, boxes, replay))
    return out


def lr_at(epoch, base_lr, milestones):
    return base_lr * 0.1 ** sum(epoch >= m for m in milestones)


def _subsample(items, n, rng):
    return np.stack([subsample_cloud(it.scene, n, rng)[1] for it in items])


class _EpochLog:
    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, **vals):
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.count += 1

    def means(self):
        return {k: v / max(self.count, 1) for k, v in self.sums.items()}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def supervised_step(model: Detector, opt: AdamState, items, rng, weights=LossWeights(), scale=1.0):
    """One augmented supervised update; returns the loss breakdown."""
    cfg = model.cfg
    pts = _subsample(items, cfg.n_points, rng.child("sampling"))
    aug_rng = rng.child("augmentation")
    gt = []
    for b, it in enumerate(items):
        t = draw_augmentation(aug_rng)
        pts[b] = t.apply_points(pts[b])
        gt.append(gt_arrays(t.apply_boxes(it.boxes)))
    props, _ = model.forward(pts, rng.child("model"))
    assignment = assign_targets(props, gt, cfg)
    loss, parts = supervised_loss(props, assignment, model.mean_size, cfg.heading_bins, weights)
    total = T.mul(loss, scale)
    total.backward()
    adam_step(model.params, opt)
    return {"sup": float(loss.values), "total": float(total.values), **parts}


def train_base(det_cfg: DetectorConfig, items, class_names, mean_size, tcfg: TrainConfig, rng,
               epochs=None, on_epoch=None):
    """Supervised-only training with step decay. Returns ``(Detector, epoch log rows)``."""
    if not items:
        raise ValueError("training set is empty")
    epochs = tcfg.base_epochs if epochs is None else epochs
    cfg = DetectorConfig(**{**det_cfg.__dict__, "n_classes": len(class_names)})
    model = Detector(cfg, init_params(cfg, rng.child("init")), list(class_names), np.asarray(mean_size, dtype=np.float64))
    opt = AdamState(lr=tcfg.base_lr)
    rows = []
    for epoch in range(epochs):
        opt.lr = lr_at(epoch, tcfg.base_lr, tcfg.base_milestones)
        erng = rng.child(f"epoch/{epoch}")
        acc = _EpochLog()
        for k, batch in enumerate(_batches(len(items), tcfg.batch_size, erng.child("order"))):
            step = supervised_step(model, opt, [items[i] for i in batch], erng.child(f"step/{k}"), tcfg.weights)
            acc.add(**step)
        row = {"epoch": epoch, "lr": opt.lr, "dis": 0.0, "con": 0.0, "w_dis": 0.0, "w_con": 0.0, **acc.means()}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
    return model, rows


@dataclass
class CoTeacher:
    """Mutable state for one incremental run."""

    student: Detector
    static: Detector | None
    dynamic: Detector | None
    flags: ModeFlags
    tcfg: TrainConfig
    n_base: int
    opt: AdamState = None

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamState(lr=self.tcfg.inc_lr)


def train_step(ct: CoTeacher, items, epoch, rng):
    """One co-teaching update on a batch; returns the loss breakdown."""
    tcfg, flags, student = ct.tcfg, ct.flags, ct.student
    cfg = student.cfg
    w = tcfg.weights
    B = len(items)

    if flags.pseudo:
        raw = _subsample(items, cfg.n_points, rng.child("pseudo_sampling"))
        tprops, _ = ct.static.forward(raw, rng.child("pseudo_model"))
        pseudo = pseudo_labels_from_proposals(tprops, ct.static.mean_size, ct.static.cfg.heading_bins, tcfg.pseudo)
    else:
        pseudo = [[] for _ in items]
    labels = []
    n_pseudo = 0
    for it, ps in zip(items, pseudo):
        if it.replay:
            mixed = mix_labels(ps, [], tcfg.dedupe_iou, replay_gt=it.boxes)
        else:
            mixed = mix_labels(ps, it.boxes, tcfg.dedupe_iou)
        n_pseudo += len(mixed.pseudo_boxes)
        labels.append(mixed.boxes)

    srng = rng.child("sampling")
    xi = _subsample(items, cfg.n_points, srng)
    xj = _subsample(items, cfg.n_points, srng)
    aug_rng = rng.child("augmentation")
    transforms = [draw_augmentation(aug_rng) for _ in items]
    gt = []
    for b, t in enumerate(transforms):
        xj[b] = t.apply_points(xj[b])
        gt.append(gt_arrays(t.apply_boxes(labels[b])))

    props, indices = student.forward(xj, rng.child("student"))
    assignment = assign_targets(props, gt, cfg)
    sup, parts = supervised_loss(props, assignment, student.mean_size, cfg.heading_bins, w)
    total = T.mul(sup, w.lambda_s)
    dis_val = con_val = 0.0
    w_dis = ramp_up_weight(epoch, w.ramp_up_epochs, w.lambda_d) if flags.distill else 0.0
    w_con = ramp_up_weight(epoch, w.ramp_up_epochs, w.lambda_c) if flags.consistency else 0.0

    if flags.distill:
        sprops = ct.static.forward_with_indices(xj, indices)
        nb = ct.n_base
        variant = tcfg.distill
        sboxes = tboxes = None
        if variant.targets - {"class_logits"}:
            sboxes = (props.center, decoded_sizes(props, student.mean_size))
            tb, _, _ = decode_arrays(sprops, ct.static.mean_size, ct.static.cfg.heading_bins)
            tboxes = (tb[:, :3], tb[:, 3:6])
        dis = distillation_loss(props.class_logits[:, :nb], sprops.class_logits.values[:, :nb], variant,
                                sboxes, tboxes)
        dis_val = float(dis.values)
        if w_dis:
            total = total + T.mul(dis, w_dis)

    if flags.consistency:
        dprops, _ = ct.dynamic.forward(xi, rng.child("dynamic"))
        dboxes, _, dcls = decode_arrays(dprops, ct.dynamic.mean_size, ct.dynamic.cfg.heading_bins)
        K = dprops.n_proposals
        tcent = np.empty((B * K, 3))
        tsize = np.empty((B * K, 3))
        for b, t in enumerate(transforms):
            moved = t.apply_box_array(dboxes[b * K:(b + 1) * K])
            tcent[b * K:(b + 1) * K] = moved[:, :3]
            tsize[b * K:(b + 1) * K] = moved[:, 3:6]
        con, _ = consistency_loss(props.center, decoded_sizes(props, student.mean_size), props.class_logits,
                                  tcent, tsize, dcls, B)
        con_val = float(con.values)
        if w_con:
            total = total + T.mul(con, w_con)

    total.backward()
    adam_step(student.params, ct.opt)
    if ct.dynamic is not None:
        ema_update(ct.dynamic.params, student.params, tcfg.ema.alpha(epoch, w.ramp_up_epochs))
    return {"sup": float(sup.values), "dis": dis_val, "con": con_val, "total": float(total.values),
            "w_dis": w_dis, "w_con": w_con, "n_pseudo": n_pseudo / B, **parts}


@dataclass
class IncrementalResult:
    mode: str
    student: Detector
    dynamic: Detector | None
    log: list

    @property
    def inference_key(self):
        return MODE_FLAGS[self.mode].inference if self.dynamic is not None else "student"

    @property
    def inference_model(self):
        return self.dynamic if self.inference_key == "teacher" else self.student

    def models(self):
        out = {"student": self.student}
        if self.dynamic is not None:
            out["teacher"] = self.dynamic
        return out


def prepare_student(base: Detector, novel_class_names, mode, rng):
    """Extend the base model's classifier and set trainable masks for ``mode``."""
    student = base.extended(novel_class_names, rng.child("novel_init"))
    student.params.clear_masks()
    n_old = base.cfg.n_classes
    if mode == "freeze_add":
        for name in student.params.names():
            if name != "cls.w":
                student.params.set_mask(name, np.zeros(student.params[name].shape, dtype=bool))
    if mode in ("freeze_add", "finetune"):
        mask = np.ones(student.params["cls.w"].shape, dtype=bool)
        mask[:n_old] = False
        student.params.set_mask("cls.w", mask)
    return student


def train_incremental(base: Detector, items, novel_class_names, mode, tcfg: TrainConfig, rng,
                      epochs=None, on_epoch=None) -> IncrementalResult:
    """Incremental training of ``base`` on ``items`` (novel GT, optionally replay) under ``mode``."""
    if mode not in MODE_FLAGS:
        raise ValueError(f"unknown incremental mode {mode!r}")
    overlap = set(base.class_names) & set(novel_class_names)
    if overlap:
        raise ValueError(f"novel classes overlap the base classes: {sorted(overlap)}")
    if not items:
        raise ValueError("incremental training set is empty")
    flags = MODE_FLAGS[mode]
    epochs = tcfg.inc_epochs if epochs is None else epochs
    student = prepare_student(base, novel_class_names, mode, rng)
    static = base.copy(frozen=True) if (flags.pseudo or flags.distill) else None
    dynamic = None
    if flags.consistency:
        dynamic = student.copy(frozen=True)
    ct = CoTeacher(student, static, dynamic, flags, tcfg, n_base=base.cfg.n_classes)
    rows = []
    for epoch in range(epochs):
        erng = rng.child(f"epoch/{epoch}")
        acc = _EpochLog()
        for k, batch in enumerate(_batches(len(items), tcfg.batch_size, erng.child("order"))):
            srng = erng.child(f"step/{k}")
            batch_items = [items[i] for i in batch]
            if flags.pseudo or flags.distill or flags.consistency:
                step = train_step(ct, batch_items, epoch, srng)
            else:
                step = supervised_step(student, ct.opt, batch_items, srng, tcfg.weights, tcfg.weights.lambda_s)
            acc.add(**step)
        row = {"epoch": epoch, "lr": ct.opt.lr, "dis": 0.0, "con": 0.0, "w_dis": 0.0, "w_con": 0.0, **acc.means()}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
    return IncrementalResult(mode, student, dynamic, rows)


def sequential_round(prev: Detector, items, novel_class_names, mode, tcfg, rng, epochs=None, on_epoch=None):
    """Next incremental round: the previous round's student becomes the static teacher."""
    base = prev.copy()
    base.params.zero_grad()
    return train_incremental(base, items, novel_class_names, mode, tcfg, rng, epochs, on_epoch)
