"""A desk-scale vote-based 3D detector with reusable sampling indices.

Pipeline per cloud: farthest-point seeds -> local max-pool aggregation ->
votes (seed + regressed offset) -> farthest-point cluster centres among the
votes -> grouped vote features -> a regressor (objectness, centre, size,
heading) and a bias-free linear classifier.

All functions take a batch of clouds shaped [B, N, 3] (a single [N, 3] cloud
is promoted to B = 1); per-proposal tensors are flattened to [B * K, ...].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .geometry import Box3D, points_in_box, wrap_angle
from .numerics import ParamStore, RngStream, Tensor
from .numerics import ops as T

CHECKPOINT_HEADER = "SDCOT-CHECKPOINT v1"
SIZE_EPS = 1e-3


@dataclass
class DetectorConfig:
    n_points: int = 512
    n_seeds: int = 128
    n_proposals: int = 16
    heading_bins: int = 1
    n_classes: int = 3
    feature_dim: int = 32
    grouping_radius: float = 0.6
    n_neighbors: int = 16
    vote_loss_radius_near: float = 0.3
    vote_loss_radius_far: float = 0.6

    def __post_init__(self):
        if not (1 <= self.n_seeds <= self.n_points and 1 <= self.n_proposals <= self.n_seeds):
            raise ValueError("need 1 <= K <= M <= N")
        if self.heading_bins < 1 or self.n_classes < 1 or self.n_neighbors < 1:
            raise ValueError("heading bins, classes and neighbours must be >= 1")
        if not (0 < self.vote_loss_radius_near < self.vote_loss_radius_far) or self.grouping_radius <= 0:
            raise ValueError("radii must be positive with near < far")

    @property
    def reg_dim(self):
        return 8 + 2 * self.heading_bins


@dataclass
class SampleIndices:
    seed_indices: np.ndarray     # [B, M] into the N input points
    cluster_indices: np.ndarray  # [B, K] into the M votes

    def copy(self):
        return SampleIndices(self.seed_indices.copy(), self.cluster_indices.copy())


@dataclass
class ProposalSet:
    objectness_logits: Tensor    # [BK, 2]
    center: Tensor               # [BK, 3], absolute
    size_offsets: Tensor         # [BK, 3], class agnostic
    heading_scores: Tensor       # [BK, 2 NH]: bin scores then normalized residuals
    class_logits: Tensor         # [BK, NC]
    indices: SampleIndices
    batch_size: int
    cluster_positions: np.ndarray       # [BK, 3] vote positions used as cluster centres
    cluster_seed_positions: np.ndarray  # [BK, 3] seeds those votes came from
    seed_positions: np.ndarray          # [BM, 3]
    vote_positions: Tensor              # [BM, 3]

    @property
    def n_proposals(self):
        return self.objectness_logits.shape[0] // self.batch_size


def _uniform(rng, fan_in, shape, gain):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: DetectorConfig, rng: RngStream) -> ParamStore:
    F = cfg.feature_dim
    relu_gain = math.sqrt(6.0)
    layers = [
        ("bb.nbr1", F, 3, relu_gain), ("bb.nbr2", F, F, relu_gain),
        ("bb.seed", F, 3, relu_gain), ("bb.fuse", F, 2 * F, relu_gain),
        ("vote.l1", F, F, relu_gain), ("vote.l2", 3 + F, F, 0.1),
        ("prop.l1", F, F + 3, relu_gain), ("prop.l2", F, F, relu_gain),
        ("head.l1", F, F, relu_gain), ("head.l2", F, F, relu_gain),
        ("reg", cfg.reg_dim, F, 1.0),
    ]
    store = ParamStore()
    for name, out_dim, in_dim, gain in layers:
        store.add(f"{name}.w", _uniform(rng, in_dim, (out_dim, in_dim), gain))
        store.add(f"{name}.b", np.zeros(out_dim))
    store.add("cls.w", _uniform(rng, F, (cfg.n_classes, F), 1.0))
    return store


def _lin(params, name, x, act=True):
    y = T.linear(x, params[f"{name}.w"], params[f"{name}.b"])
    return T.relu(y) if act else y


def _as_batch(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    if points.ndim != 3 or points.shape[2] != 3:
        raise ValueError(f"expected [B, N, 3] points, got {points.shape}")
    if points.shape[1] == 0:
        raise ValueError("point cloud is empty")
    return points


def farthest_point_sample(points, count, rng=None, start=None):
    """Greedy farthest point sampling from a start drawn from ``rng`` (or given)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if count > n or count < 0:
        raise ValueError(f"cannot sample {count} of {n} points")
    if start is None:
        start = 0 if rng is None else int(rng.integers(n))
    return _kernels.fps(points, count, start)


def backbone_forward(params, cfg, points, seed_indices):
    """Seed features [BM, F] and seed positions [BM, 3]."""
    points = _as_batch(points)
    B, N, _ = points.shape
    seed_indices = np.asarray(seed_indices, dtype=np.int64).reshape(B, -1)
    M = seed_indices.shape[1]
    S, r = cfg.n_neighbors, cfg.grouping_radius
    seeds = np.take_along_axis(points, seed_indices[..., None], axis=1)
    rel = np.empty((B, M, S, 3))
    for b in range(B):
        nbr = _kernels.ball_query(seeds[b], points[b], r, S)
        rel[b] = points[b][nbr] - seeds[b][:, None, :]
    rel = Tensor(rel.reshape(B * M * S, 3) / r)
    h = _lin(params, "bb.nbr2", _lin(params, "bb.nbr1", rel))
    pooled = T.group_max(h, S)
    seed_pos = seeds.reshape(B * M, 3)
    sf = _lin(params, "bb.seed", Tensor(seed_pos))
    feat = _lin(params, "bb.fuse", T.concat([sf, pooled], axis=1))
    return feat, seed_pos


def vote(params, seed_features, seed_positions):
    """Vote positions (seed + offset) and features (seed feature + residual)."""
    out = _lin(params, "vote.l2", _lin(params, "vote.l1", seed_features), act=False)
    pos = T.add(Tensor(seed_positions), out[:, :3])
    feat = T.add(seed_features, out[:, 3:])
    return pos, feat


def propose(params, cfg, vote_pos, vote_feat, cluster_indices, batch_size):
    """Group votes around the chosen cluster centres and run the two heads."""
    B = batch_size
    M = vote_pos.shape[0] // B
    cluster_indices = np.asarray(cluster_indices, dtype=np.int64).reshape(B, -1)
    K = cluster_indices.shape[1]
    S, r = cfg.n_neighbors, cfg.grouping_radius
    flat_clusters = (cluster_indices + np.arange(B)[:, None] * M).reshape(-1)
    vp = vote_pos.values.reshape(B, M, 3)
    groups = np.empty((B, K, S), dtype=np.int64)
    for b in range(B):
        groups[b] = _kernels.ball_query(vp[b][cluster_indices[b]], vp[b], r, S) + b * M
    groups = groups.reshape(-1)
    centres = T.take_rows(vote_pos, flat_clusters)
    rel = T.mul(T.sub(T.take_rows(vote_pos, groups), T.take_rows(centres, np.repeat(np.arange(B * K), S))),
                1.0 / r)
    x = T.concat([T.take_rows(vote_feat, groups), rel], axis=1)
    h = _lin(params, "prop.l2", _lin(params, "prop.l1", x))
    h = T.group_max(h, S)
    h = _lin(params, "head.l2", _lin(params, "head.l1", h))
    reg = _lin(params, "reg", h, act=False)
    logits = T.linear(h, params["cls.w"])
    return {
        "objectness_logits": reg[:, 0:2],
        "center": T.add(centres, reg[:, 2:5]),
        "size_offsets": reg[:, 5:8],
        "heading_scores": reg[:, 8:],
        "class_logits": logits,
        "cluster_positions": centres.values,
        "flat_clusters": flat_clusters,
    }


def _check_indices(indices, B, N, M):
    s, c = np.asarray(indices.seed_indices), np.asarray(indices.cluster_indices)
    if s.shape[0] != B or c.shape[0] != B:
        raise ValueError("indices batch size does not match the points")
    if s.size and (s.min() < 0 or s.max() >= N):
        raise ValueError("seed index out of range")
    if c.size and (c.min() < 0 or c.max() >= M):
        raise ValueError("cluster index out of range")


def forward_with_indices(params, cfg, points, indices: SampleIndices) -> ProposalSet:
    """Deterministic forward reusing ``indices`` so proposals align slot by slot."""
    points = _as_batch(points)
    B, N, _ = points.shape
    M = np.asarray(indices.seed_indices).reshape(B, -1).shape[1]
    _check_indices(indices, B, N, M)
    feat, seed_pos = backbone_forward(params, cfg, points, indices.seed_indices)
    vpos, vfeat = vote(params, feat, seed_pos)
    out = propose(params, cfg, vpos, vfeat, indices.cluster_indices, B)
    return ProposalSet(
        objectness_logits=out["objectness_logits"], center=out["center"],
        size_offsets=out["size_offsets"], heading_scores=out["heading_scores"],
        class_logits=out["class_logits"], indices=indices, batch_size=B,
        cluster_positions=out["cluster_positions"],
        cluster_seed_positions=seed_pos[out["flat_clusters"]],
        seed_positions=seed_pos, vote_positions=vpos,
    )


def forward(params, cfg, points, rng) -> tuple[ProposalSet, SampleIndices]:
    """Stochastic forward: both sub-sampling steps draw their start from ``rng``."""
    points = _as_batch(points)
    B, N, _ = points.shape
    M, K = cfg.n_seeds, cfg.n_proposals
    if N < M:
        raise ValueError(f"cloud has {N} points, fewer than {M} seeds")
    seed_idx = np.stack([farthest_point_sample(points[b], M, rng) for b in range(B)])
    feat, seed_pos = backbone_forward(params, cfg, points, seed_idx)
    vpos, vfeat = vote(params, feat, seed_pos)
    vp = vpos.values.reshape(B, M, 3)
    cluster_idx = np.stack([farthest_point_sample(vp[b], K, rng) for b in range(B)])
    indices = SampleIndices(seed_idx, cluster_idx)
    out = propose(params, cfg, vpos, vfeat, cluster_idx, B)
    props = ProposalSet(
        objectness_logits=out["objectness_logits"], center=out["center"],
        size_offsets=out["size_offsets"], heading_scores=out["heading_scores"],
        class_logits=out["class_logits"], indices=indices, batch_size=B,
        cluster_positions=out["cluster_positions"],
        cluster_seed_positions=seed_pos[out["flat_clusters"]],
        seed_positions=seed_pos, vote_positions=vpos,
    )
    return props, indices


def extend_classifier(params: ParamStore, feature_dim, n_new_classes, init_rng) -> ParamStore:
    """Copy of ``params`` with ``n_new_classes`` randomly initialised classifier rows appended."""
    if n_new_classes < 1:
        raise ValueError("must add at least one class")
    out = params.copy()
    old = params["cls.w"].values
    bound = 1.0 / math.sqrt(feature_dim)
    new_rows = init_rng.uniform(-bound, bound, size=(n_new_classes, old.shape[1]))
    out.replace("cls.w", np.vstack([old, new_rows]))
    return out


def heading_decode(scores, nh):
    scores = np.asarray(scores)
    bins = scores[:, :nh].argmax(axis=1)
    resid = scores[np.arange(len(scores)), nh + bins]
    width = 2.0 * np.pi / nh
    return wrap_angle(bins * width + resid * (np.pi / nh))


def heading_encode(heading, nh):
    """(bin, normalized residual) targets for cuboid headings (period pi)."""
    h = (np.asarray(heading) + 0.5 * np.pi) % np.pi - 0.5 * np.pi
    width = 2.0 * np.pi / nh
    bins = np.floor((h % (2 * np.pi) + 0.5 * width) / width).astype(np.int64) % nh
    resid = wrap_angle(h - bins * width) / (np.pi / nh)
    return bins, resid


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def decode_arrays(p: ProposalSet, mean_size, nh):
    """Box array [BK, 7], objectness probability [BK], class probabilities [BK, NC]."""
    size = np.maximum(np.asarray(mean_size) * np.exp(p.size_offsets.values), SIZE_EPS)
    heading = heading_decode(p.heading_scores.values, nh)
    boxes = np.column_stack([p.center.values, size, heading])
    obj = _softmax(p.objectness_logits.values)[:, 1]
    cls = _softmax(p.class_logits.values)
    return boxes, obj, cls


def decode_proposals(p: ProposalSet, mean_size, nh=1):
    """Per-cloud lists of ``(Box3D, objectness probability)``.

    Score is objectness probability times the top class probability.
    """
    boxes, obj, cls = decode_arrays(p, mean_size, nh)
    label = cls.argmax(axis=1)
    score = obj * cls.max(axis=1)
    K = p.n_proposals
    out = []
    for b in range(p.batch_size):
        sl = range(b * K, (b + 1) * K)
        out.append([(Box3D.from_array(boxes[i], int(label[i]), float(score[i])), float(obj[i])) for i in sl])
    return out


@dataclass
class TargetAssignment:
    objectness: np.ndarray   # [BK] 1 positive, 0 negative, -1 ignored
    matched: np.ndarray      # [BK] row into gt_boxes (valid where positive)
    gt_boxes: np.ndarray     # [G, 7], all clouds concatenated
    gt_classes: np.ndarray   # [G]
    vote_target: np.ndarray  # [BM, 3]
    vote_mask: np.ndarray    # [BM] bool

    @property
    def positive(self):
        return self.objectness == 1


def assign_targets(p: ProposalSet, gt, cfg: DetectorConfig) -> TargetAssignment:
    """Objectness labels from vote-cluster centres and per-seed vote targets.

    ``gt`` is a per-cloud list of ``(boxes [n, 7], class ids [n])``.
    """
    B, K = p.batch_size, p.n_proposals
    M = p.seed_positions.shape[0] // B
    labels = np.zeros(B * K, dtype=np.int64)
    matched = np.zeros(B * K, dtype=np.int64)
    vt = np.zeros((B * M, 3))
    vmask = np.zeros(B * M, dtype=bool)
    all_boxes, all_cls, offset = [], [], 0
    for b in range(B):
        boxes, cls = gt[b]
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        sl = slice(b * K, (b + 1) * K)
        if len(boxes):
            d = np.linalg.norm(p.cluster_positions[sl, None, :] - boxes[None, :, :3], axis=2)
            nearest = d.argmin(axis=1)
            dmin = d[np.arange(K), nearest]
            lab = np.where(dmin < cfg.vote_loss_radius_near, 1, np.where(dmin > cfg.vote_loss_radius_far, 0, -1))
            labels[sl] = lab
            matched[sl] = nearest + offset
            seeds = p.seed_positions[b * M:(b + 1) * M]
            for j, box in enumerate(boxes):
                inside = points_in_box(seeds, box) & ~vmask[b * M:(b + 1) * M]
                rows = np.nonzero(inside)[0] + b * M
                vt[rows] = box[:3]
                vmask[rows] = True
            all_boxes.append(boxes)
            all_cls.append(np.asarray(cls, dtype=np.int64).reshape(-1))
            offset += len(boxes)
    gt_boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 7))
    gt_cls = np.concatenate(all_cls) if all_cls else np.zeros(0, dtype=np.int64)
    return TargetAssignment(labels, matched, gt_boxes, gt_cls, vt, vmask)


@dataclass
class Detector:
    """Parameters plus everything needed to interpret them."""

    cfg: DetectorConfig
    params: ParamStore
    class_names: list
    mean_size: np.ndarray
    meta: dict = field(default_factory=dict)

    def forward(self, points, rng):
        return forward(self.params, self.cfg, points, rng)

    def forward_with_indices(self, points, indices):
        return forward_with_indices(self.params, self.cfg, points, indices)

    def copy(self, frozen=False):
        return Detector(DetectorConfig(**asdict(self.cfg)), self.params.copy(frozen=frozen),
                        list(self.class_names), np.array(self.mean_size), dict(self.meta))

    def extended(self, new_class_names, init_rng):
        params = extend_classifier(self.params, self.cfg.feature_dim, len(new_class_names), init_rng)
        cfg = DetectorConfig(**{**asdict(self.cfg), "n_classes": self.cfg.n_classes + len(new_class_names)})
        return Detector(cfg, params, list(self.class_names) + list(new_class_names),
                        np.array(self.mean_size), dict(self.meta))


def save_checkpoint(path, models: dict, inference: str, meta=None):
    """Write one or more detectors (sharing config layout) into a single text file.

    Line 1 is the format tag; line 2 a JSON header with each model's config,
    class names and mean size; the rest is the parameter serialization with
    names prefixed by the model key.
    """
    header = {"inference": inference, "meta": meta or {}, "models": {}}
    body = []
    for key, det in models.items():
        header["models"][key] = {
            "config": asdict(det.cfg),
            "class_names": list(det.class_names),
            "mean_size": [float(v).hex() for v in det.mean_size],
        }
        for line in det.params.to_text().splitlines()[1:]:
            body.append(f"{key}/{line}")
    text = CHECKPOINT_HEADER + "\n" + json.dumps(header, sort_keys=True) + "\n" + "\n".join(body) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def load_checkpoint(path):
    """Returns ``(models dict, inference key, meta)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a checkpoint file")
    header = json.loads(lines[1])
    grouped = {k: [] for k in header["models"]}
    for line in lines[2:]:
        if not line:
            continue
        key, rest = line.split("/", 1)
        grouped[key].append(rest)
    models = {}
    for key, info in header["models"].items():
        params = ParamStore.from_lines(grouped[key])
        mean = np.array([float.fromhex(v) for v in info["mean_size"]])
        models[key] = Detector(DetectorConfig(**info["config"]), params, info["class_names"], mean)
    return models, header["inference"], header["meta"]
