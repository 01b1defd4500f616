"""Synthetic indoor scenes, class splits, replay exemplars and perturbation draws.

Scenes are 10 x 10 x 3 rooms centred on the origin (floor at z = 0) holding a
few cuboid objects whose classes differ by extent and aspect ratio. Object
points are sampled on the five visible faces; the rest of the cloud is floor
and free-space clutter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, PoseTransform, boxes_to_array, iou_matrix, points_in_box

SCENE_HEADER = "SDCOT-SCENE"
SCENE_VERSION = "v1"


class ConfigurationError(ValueError):
    """A split, exemplar or generation request cannot be satisfied."""


@dataclass(frozen=True)
class ClassSpec:
    name: str
    mean_size: tuple
    jitter: float = 0.1
    density: float = 1.0
    weight: float = 1.0


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigurationError("class names must be unique")
        if names != sorted(names):
            raise ConfigurationError("class catalog must be in alphabetical order")
        for c in self.classes:
            if not all(s > 0 for s in c.mean_size):
                raise ConfigurationError(f"class {c.name!r} has a non-positive size")

    @property
    def names(self):
        return [c.name for c in self.classes]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown class {name!r}") from None

    def __len__(self):
        return len(self.classes)

    def mean_size(self):
        """Catalog-wide mean extent, the anchor for class-agnostic size decoding."""
        return np.mean([c.mean_size for c in self.classes], axis=0)

    def with_weights(self, weights):
        return ClassCatalog(tuple(
            ClassSpec(c.name, c.mean_size, c.jitter, c.density, float(weights.get(c.name, c.weight)))
            for c in self.classes
        ))


DEFAULT_CATALOG = ClassCatalog((
    ClassSpec("box", (0.8, 0.8, 0.8)),
    ClassSpec("cone", (0.5, 0.5, 1.5)),
    ClassSpec("cylinder", (1.3, 1.3, 0.5)),
    ClassSpec("slab", (1.8, 1.1, 0.25)),
    ClassSpec("tube", (1.9, 0.45, 0.45)),
    ClassSpec("wedge", (1.1, 0.6, 1.1)),
))


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray
    instance_ids: np.ndarray
    gt_boxes: list

    @property
    def class_ids(self):
        return sorted({b.class_id for b in self.gt_boxes})

    def with_boxes(self, boxes):
        """Same geometry, different annotation set."""
        return Scene(self.scene_id, self.points, self.instance_ids, list(boxes))


@dataclass(frozen=True)
class SceneParams:
    n_points: int = 1024
    room: tuple = (10.0, 10.0, 3.0)
    min_objects: int = 1
    max_objects: int = 6
    clutter_fraction: float = 0.02
    heading_range: float = 0.0
    surface_noise: float = 0.01
    margin: float = 0.3
    max_tries: int = 200


def _sample_faces(size, n, rng, noise):
    """``n`` points on the five non-bottom faces of a box centred at the origin."""
    dx, dy, dz = size
    faces = np.array([dx * dy, dy * dz, dy * dz, dx * dz, dx * dz])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    u[face == 0, 2] = 0.5 * dz
    u[face == 1, 0] = 0.5 * dx
    u[face == 2, 0] = -0.5 * dx
    u[face == 3, 1] = 0.5 * dy
    u[face == 4, 1] = -0.5 * dy
    u += rng.normal(0.0, noise, size=u.shape)
    half = 0.5 * np.array(size)
    return np.clip(u, -half, half)


def generate_scene(catalog, class_pool, rng, params=SceneParams(), scene_id="scene"):
    """Place 1-6 non-overlapping objects from ``class_pool`` and sample a cloud.

    Objects keep a footprint gap of ``params.margin``, so any two boxes have
    zero IoU. Placement is retried a bounded number of times and the scene may
    end up with fewer objects than drawn.
    """
    class_pool = list(class_pool)
    if not class_pool:
        raise ConfigurationError("class pool is empty")
    weights = np.array([catalog.classes[c].weight for c in class_pool], dtype=np.float64)
    weights = weights / weights.sum()
    rx, ry, rz = params.room
    n_obj = int(rng.integers(params.min_objects, params.max_objects + 1))
    boxes, padded = [], []
    for _ in range(n_obj):
        cid = int(class_pool[rng.choice(len(class_pool), p=weights)])
        spec = catalog.classes[cid]
        for _ in range(params.max_tries):
            size = np.array(spec.mean_size) * rng.uniform(1 - spec.jitter, 1 + spec.jitter, size=3)
            heading = rng.uniform(-params.heading_range, params.heading_range) if params.heading_range else 0.0
            reach = 0.5 * math.hypot(size[0], size[1])
            cx = rng.uniform(-0.5 * rx + reach, 0.5 * rx - reach)
            cy = rng.uniform(-0.5 * ry + reach, 0.5 * ry - reach)
            cand = np.array([cx, cy, 0.5 * size[2], *size, heading])
            grown = cand.copy()
            grown[3:5] += params.margin
            grown[2], grown[5] = 0.5 * rz, rz
            if padded and iou_matrix(grown[None], np.array(padded)).max() > 0:
                continue
            boxes.append(Box3D.from_array(cand, class_id=cid))
            padded.append(grown)
            break
    n_total = params.n_points
    n_clutter = int(round(params.clutter_fraction * n_total)) if boxes else n_total
    n_object = n_total - n_clutter
    pts, inst = [], []
    if boxes:
        area = np.array([
            catalog.classes[b.class_id].density
            * (b.size[0] * b.size[1] + 2 * b.size[2] * (b.size[0] + b.size[1]))
            for b in boxes
        ])
        alloc = np.maximum(8, np.floor(n_object * area / area.sum()).astype(int))
        alloc[np.argmax(alloc)] += n_object - alloc.sum()
        for k, (b, m) in enumerate(zip(boxes, alloc)):
            local = _sample_faces(b.size, int(m), rng, params.surface_noise)
            c, s = math.cos(b.heading), math.sin(b.heading)
            world = np.empty_like(local)
            world[:, 0] = c * local[:, 0] - s * local[:, 1] + b.center[0]
            world[:, 1] = s * local[:, 0] + c * local[:, 1] + b.center[1]
            world[:, 2] = local[:, 2] + b.center[2]
            pts.append(world)
            inst.append(np.full(int(m), k))
    clutter = []
    need = n_clutter
    while need > 0:
        cand = np.column_stack([
            rng.uniform(-0.5 * rx, 0.5 * rx, size=2 * need),
            rng.uniform(-0.5 * ry, 0.5 * ry, size=2 * need),
            np.where(rng.random(2 * need) < 0.5, rng.uniform(0.0, 0.03, size=2 * need),
                     rng.uniform(0.0, rz, size=2 * need)),
        ])
        free = np.ones(len(cand), dtype=bool)
        for b in boxes:
            grown = b.to_array()
            grown[3:6] += 0.1
            free &= ~points_in_box(cand, grown)
        cand = cand[free][:need]
        clutter.append(cand)
        need -= len(cand)
    if clutter:
        pts.append(np.concatenate(clutter))
        inst.append(np.full(n_clutter, -1))
    points = np.concatenate(pts)
    instance_ids = np.concatenate(inst).astype(np.int64)
    perm = rng.permutation(len(points))
    return Scene(scene_id, points[perm], instance_ids[perm], boxes)


@dataclass
class SplitSpec:
    base_classes: list
    novel_rounds: list
    n_train: int = 400
    n_val: int = 100
    replay_ratio: float = 0.0

    def __post_init__(self):
        seen = set(self.base_classes)
        if len(seen) != len(self.base_classes):
            raise ConfigurationError("duplicate base class")
        for rnd in self.novel_rounds:
            if not rnd:
                raise ConfigurationError("empty novel round")
            overlap = seen & set(rnd)
            if overlap or len(set(rnd)) != len(rnd):
                raise ConfigurationError(f"class sets overlap: {sorted(overlap)}")
            seen |= set(rnd)
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ConfigurationError("replay ratio must lie in [0, 1]")

    @property
    def novel_classes(self):
        return [c for rnd in self.novel_rounds for c in rnd]

    @property
    def all_classes(self):
        return list(self.base_classes) + self.novel_classes


@dataclass
class Splits:
    base: list
    novel_rounds: list
    val: list
    novel_all: list = field(default_factory=list)


def filter_split(scenes, class_ids):
    """Scenes holding at least one ``class_ids`` object, annotations restricted to them."""
    keep = set(class_ids)
    out = []
    for s in scenes:
        boxes = [b for b in s.gt_boxes if b.class_id in keep]
        if boxes:
            out.append(s.with_boxes(boxes))
    return out


def build_splits(train_scenes, val_scenes, spec: SplitSpec, catalog=DEFAULT_CATALOG) -> Splits:
    base_ids = [catalog.index(c) for c in spec.base_classes]
    rounds = [[catalog.index(c) for c in rnd] for rnd in spec.novel_rounds]
    d_base = filter_split(train_scenes, base_ids)
    d_rounds = [filter_split(train_scenes, ids) for ids in rounds]
    novel_all = filter_split(train_scenes, [i for ids in rounds for i in ids])
    if not d_base or any(not d for d in d_rounds):
        raise ConfigurationError("a split came out empty")
    keep = set(base_ids) | {i for ids in rounds for i in ids}
    val = [s.with_boxes([b for b in s.gt_boxes if b.class_id in keep]) for s in val_scenes]
    return Splits(d_base, d_rounds, val, novel_all)


def sample_exemplars(d_base, ratio, rng, base_class_ids, max_retries=1000):
    """Uniformly sample ``ceil(ratio * |D_base|)`` scenes covering every base class."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError("exemplar ratio must lie in (0, 1]")
    required = set(base_class_ids)
    present = {b.class_id for s in d_base for b in s.gt_boxes}
    if not required <= present:
        raise ConfigurationError(f"classes {sorted(required - present)} never occur in D_base")
    count = min(len(d_base), math.ceil(ratio * len(d_base)))
    for _ in range(max_retries):
        idx = np.sort(rng.choice(len(d_base), size=count, replace=False))
        picked = [d_base[i] for i in idx]
        if required <= {b.class_id for s in picked for b in s.gt_boxes}:
            return picked
    raise ConfigurationError("could not draw an exemplar set covering every base class")


def subsample_cloud(scene, n_points, rng):
    """Indices, points and instance ids of a uniform ``n_points`` subsample."""
    n = len(scene.points)
    if n == 0:
        raise ConfigurationError("scene has no points")
    idx = rng.choice(n, size=n_points, replace=n < n_points)
    return idx, scene.points[idx], scene.instance_ids[idx]


AUG_ROTATION = math.pi / 6
AUG_SCALE = (0.85, 1.15)


def draw_augmentation(rng) -> PoseTransform:
    flip = bool(rng.random() < 0.5)
    rot = float(rng.uniform(-AUG_ROTATION, AUG_ROTATION))
    scale = float(rng.uniform(*AUG_SCALE))
    return PoseTransform(flip, rot, scale)


def write_scene(path, scene, class_names):
    lines = [f"{SCENE_HEADER} {SCENE_VERSION} {len(scene.points)} {len(scene.gt_boxes)}"]
    for p, i in zip(scene.points, scene.instance_ids):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(i)}")
    for b in scene.gt_boxes:
        vals = " ".join(f"{v:.17g}" for v in (*b.center, *b.size, b.heading))
        lines.append(f"{vals} {class_names[b.class_id]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path, class_names, scene_id=None):
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split()
    if len(head) != 4 or head[0] != SCENE_HEADER or head[1] != SCENE_VERSION:
        raise ValueError(f"{path}: not an {SCENE_HEADER} {SCENE_VERSION} file")
    n_pts, n_box = int(head[2]), int(head[3])
    body = lines[1:1 + n_pts]
    arr = np.array([ln.split() for ln in body], dtype=np.float64).reshape(n_pts, 4)
    boxes = []
    for ln in lines[1 + n_pts:1 + n_pts + n_box]:
        parts = ln.split()
        vals = np.array(parts[:7], dtype=np.float64)
        if parts[7] not in class_names:
            raise ValueError(f"{path}: unknown class {parts[7]!r}")
        boxes.append(Box3D.from_array(vals, class_id=list(class_names).index(parts[7])))
    return Scene(scene_id or path.stem, arr[:, :3].copy(), arr[:, 3].astype(np.int64), boxes)


def generate_dataset(catalog, n_train, n_val, seed, params=SceneParams()):
    """Train and validation scenes, each drawn from its own labelled stream."""
    from .numerics import RngStream

    pool = list(range(len(catalog)))
    root = RngStream(seed, "data")
    train = [generate_scene(catalog, pool, root.child(f"train/{i}"), params, f"train_{i:04d}")
             for i in range(n_train)]
    val = [generate_scene(catalog, pool, root.child(f"val/{i}"), params, f"val_{i:04d}")
           for i in range(n_val)]
    return train, val


def gt_arrays(boxes):
    """(box array [n, 7], class ids [n]) for a list of boxes."""
    return boxes_to_array(boxes), np.array([b.class_id for b in boxes], dtype=np.int64)
