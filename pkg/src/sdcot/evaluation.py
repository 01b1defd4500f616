"""Detection matching, all-point AP, mAP@0.25 by class group, forgetting deltas."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import subsample_cloud
from .detector import decode_arrays
from .geometry import Box3D, boxes_to_array, iou_matrix, nms_arrays
from .numerics import RngStream


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: Box3D

    @property
    def score(self):
        return self.box.score

    @property
    def class_id(self):
        return self.box.class_id


def match_detections(detections, gts, class_id, iou_threshold=0.25):
    """TP/FP flags for ``class_id`` detections, in descending-score order.

    ``gts`` maps scene id to a list of ground-truth boxes. Each detection
    claims the unmatched same-class GT in its scene with the highest IoU, if
    that IoU reaches the threshold. Returns ``(flags, scores, n_gt)``.
    """
    dets = [(i, d) for i, d in enumerate(detections) if d.class_id == class_id]
    dets.sort(key=lambda t: (-t[1].score, t[0]))
    gt_cls = {sid: [b for b in boxes if b.class_id == class_id] for sid, boxes in gts.items()}
    gt_arr = {sid: boxes_to_array(v) for sid, v in gt_cls.items() if v}
    used = {sid: np.zeros(len(v), dtype=bool) for sid, v in gt_arr.items()}
    n_gt = sum(len(v) for v in gt_arr.values())
    flags = np.zeros(len(dets), dtype=bool)
    scores = np.array([d.score for _, d in dets])
    for k, (_, d) in enumerate(dets):
        arr = gt_arr.get(d.scene_id)
        if arr is None:
            continue
        ious = iou_matrix(d.box.to_array()[None], arr)[0]
        ious[used[d.scene_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[d.scene_id][j] = True
            flags[k] = True
    return flags, scores, n_gt


def average_precision(flags, n_gt):
    """Area under the monotone precision envelope; ``None`` when there is nothing to score."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


@dataclass
class EvalReport:
    ap: dict                  # class name -> AP or None (skipped)
    n_gt: dict
    groups: dict              # class name -> "base" | "novel"
    iou_threshold: float = 0.25
    meta: dict = field(default_factory=dict)

    def _mean(self, group=None):
        vals = [v for c, v in self.ap.items() if v is not None and (group is None or self.groups[c] == group)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def map_base(self):
        return self._mean("base")

    @property
    def map_novel(self):
        return self._mean("novel")

    @property
    def map_all(self):
        return self._mean()

    def summary(self):
        return {"mAP_base": self.map_base, "mAP_novel": self.map_novel, "mAP_all": self.map_all}

    def to_csv(self, config_hash=""):
        out = io.StringIO()
        if config_hash:
            out.write(f"# config_hash={config_hash}\n")
        out.write(f"# iou_threshold={self.iou_threshold}\n")
        out.write("class,ap,n_gt,group\n")
        for c, v in self.ap.items():
            out.write(f"{c},{'' if v is None else f'{v:.6f}'},{self.n_gt[c]},{self.groups[c]}\n")
        for k, v in self.summary().items():
            out.write(f"{k},{'' if np.isnan(v) else f'{v:.6f}'},,summary\n")
        return out.getvalue()

    def table(self):
        s = self.summary()
        fmt = lambda v: "  --" if np.isnan(v) else f"{100 * v:6.2f}"  # noqa: E731
        lines = [f"{'class':<10} {'group':<6} {'n_gt':>5} {'AP':>7}"]
        for c, v in self.ap.items():
            lines.append(f"{c:<10} {self.groups[c]:<6} {self.n_gt[c]:>5} {'  skip' if v is None else fmt(v):>7}")
        lines.append(f"Base {fmt(s['mAP_base'])} | Novel {fmt(s['mAP_novel'])} | All {fmt(s['mAP_all'])}")
        return "\n".join(lines)


def report_from_detections(detections, gts, class_names, groups, iou_threshold=0.25):
    """EvalReport over ``class_names`` (ids are list positions)."""
    ap, n_gt = {}, {}
    for cid, name in enumerate(class_names):
        flags, _, n = match_detections(detections, gts, cid, iou_threshold)
        ap[name] = average_precision(flags, n)
        n_gt[name] = n
    return EvalReport(ap, n_gt, dict(groups), iou_threshold)


def detect(model, scenes, rng, nms_iou=0.25, score_floor=0.05, batch_size=16):
    """Run ``model`` on each scene; detections carry the model's class indices."""
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        pts = np.stack([subsample_cloud(s, model.cfg.n_points, rng)[1] for s in chunk])
        props, _ = model.forward(pts, rng)
        boxes, obj, cls = decode_arrays(props, model.mean_size, model.cfg.heading_bins)
        label = cls.argmax(axis=1)
        score = obj * cls.max(axis=1)
        K = props.n_proposals
        for b, s in enumerate(chunk):
            sl = slice(b * K, (b + 1) * K)
            keep = nms_arrays(boxes[sl], score[sl], nms_iou)
            for i in keep:
                j = b * K + int(i)
                if score[j] >= score_floor:
                    out.append(Detection(s.scene_id, Box3D.from_array(boxes[j], int(label[j]), float(score[j]))))
    return out


def evaluate(model, val_scenes, catalog_names, base_classes, novel_classes, eval_seed=0,
             iou_threshold=0.25, nms_iou=0.25, score_floor=0.05):
    """Per-class AP on ``val_scenes`` (annotated with catalog class ids)."""
    partition = list(base_classes) + list(novel_classes)
    for c in partition:
        if c not in catalog_names:
            raise ValueError(f"unknown class {c!r} in partition")
    groups = {c: "base" for c in base_classes} | {c: "novel" for c in novel_classes}
    rng = RngStream(eval_seed, "eval")
    raw = detect(model, val_scenes, rng, nms_iou, score_floor)
    # model class index -> partition position; classes the model lacks get no detections
    to_part = {i: partition.index(n) for i, n in enumerate(model.class_names) if n in partition}
    dets = [Detection(d.scene_id, d.box.with_(class_id=to_part[d.class_id])) for d in raw if d.class_id in to_part]
    cat_to_part = {catalog_names.index(n): k for k, n in enumerate(partition)}
    gts = {s.scene_id: [b.with_(class_id=cat_to_part[b.class_id]) for b in s.gt_boxes if b.class_id in cat_to_part]
           for s in val_scenes}
    report = report_from_detections(dets, gts, partition, groups, iou_threshold)
    report.meta = {"eval_seed": eval_seed, "nms_iou": nms_iou, "score_floor": score_floor}
    return report


def forgetting_metrics(before: EvalReport, after: EvalReport):
    """AP deltas (after - before) on shared classes and base-class mAP retention."""
    shared = [c for c in before.ap if c in after.ap and before.ap[c] is not None and after.ap[c] is not None]
    if not shared:
        raise ValueError("reports share no evaluated classes")
    deltas = {c: after.ap[c] - before.ap[c] for c in shared}
    base = [c for c in shared if before.groups.get(c) == "base"]
    mb = float(np.mean([before.ap[c] for c in base])) if base else float("nan")
    ma = float(np.mean([after.ap[c] for c in base])) if base else float("nan")
    retention = ma / mb if mb > 0 else float("nan")
    return {"deltas": deltas, "mean_delta": float(np.mean(list(deltas.values()))), "retention": retention,
            "base_before": mb, "base_after": ma}
