"""Oriented 3D boxes: corners, rotated-footprint IoU, greedy NMS, similarity transforms.

Boxes rotate about the vertical z axis only. IoU multiplies the area of the
intersection of the two rotated footprint rectangles (Sutherland-Hodgman
clipping) by the overlap of their z intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels


class GeometryError(ValueError):
    """Degenerate or otherwise invalid geometric input."""


def wrap_angle(a):
    """Map an angle (scalar or array) into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    heading: float = 0.0
    class_id: int = 0
    score: float = 1.0
    pseudo: bool = False

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise GeometryError("center and size need three components")
        if not all(s > 0 for s in size):
            raise GeometryError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def to_array(self):
        return np.array([*self.center, *self.size, self.heading])

    @classmethod
    def from_array(cls, arr, class_id=0, score=1.0, pseudo=False):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(arr[:3]), tuple(arr[3:6]), float(arr[6]), class_id, score, pseudo)

    @property
    def volume(self):
        return self.size[0] * self.size[1] * self.size[2]

    def with_(self, **changes):
        return replace(self, **changes)


def boxes_to_array(boxes):
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.to_array() for b in boxes])


def box_corners(b: Box3D) -> np.ndarray:
    """The 8 corners of ``b`` as an [8, 3] array (bottom face first, CCW)."""
    hx, hy, hz = (0.5 * s for s in b.size)
    local = np.array([
        [hx, hy, -hz], [-hx, hy, -hz], [-hx, -hy, -hz], [hx, -hy, -hz],
        [hx, hy, hz], [-hx, hy, hz], [-hx, -hy, hz], [hx, -hy, hz],
    ])
    c, s = math.cos(b.heading), math.sin(b.heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(b.center)


def points_in_box(points, box_arr, tol=1e-6):
    """Boolean mask of points inside a [cx..dz, heading] box (closed, with tolerance)."""
    points = np.asarray(points, dtype=np.float64)
    d = points - box_arr[:3]
    c, s = math.cos(box_arr[6]), math.sin(box_arr[6])
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    half = 0.5 * box_arr[3:6] + tol
    return (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(d[:, 2]) <= half[2])


def iou_3d(a: Box3D, b: Box3D) -> float:
    for box in (a, b):
        if not all(s > 0 for s in box.size):
            raise GeometryError(f"degenerate box size {box.size}")
    return float(_kernels.box_iou(a.to_array(), b.to_array()))


def iou_matrix(a, b):
    """Pairwise IoU between two box arrays ([n, 7] and [m, 7])."""
    return _kernels.iou_matrix(a, b)


def nms_3d(boxes, iou_threshold):
    """Greedy NMS; returns kept indices in descending-score order.

    Accepts a list of :class:`Box3D` (scores taken from the boxes).
    Ties in score go to the lower input index.
    """
    if len(boxes) == 0:
        return []
    arr = boxes_to_array(boxes)
    scores = np.array([b.score for b in boxes])
    return [int(i) for i in _kernels.nms(arr, scores, float(iou_threshold))]


def nms_arrays(box_arr, scores, iou_threshold):
    if len(box_arr) == 0:
        return np.zeros(0, dtype=np.int64)
    return _kernels.nms(box_arr, scores, float(iou_threshold))


@dataclass(frozen=True)
class PoseTransform:
    """Flip across the x=0 plane, then rotate about z, then scale uniformly."""

    flip_x: bool = False
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("scale must be positive")

    def inverse(self) -> "PoseTransform":
        # F R(-t) = R(t) F, and uniform scaling commutes with both
        rot = self.rotation if self.flip_x else -self.rotation
        return PoseTransform(self.flip_x, rot, 1.0 / self.scale)

    def apply_points(self, points):
        p = np.array(points, dtype=np.float64, copy=True).reshape(-1, 3)
        if self.flip_x:
            p[:, 0] = -p[:, 0]
        if self.rotation != 0.0:
            c, s = math.cos(self.rotation), math.sin(self.rotation)
            x, y = p[:, 0].copy(), p[:, 1].copy()
            p[:, 0] = c * x - s * y
            p[:, 1] = s * x + c * y
        if self.scale != 1.0:
            p *= self.scale
        return p

    def apply_box_array(self, arr):
        arr = np.array(arr, dtype=np.float64, copy=True).reshape(-1, 7)
        arr[:, :3] = self.apply_points(arr[:, :3])
        arr[:, 3:6] *= self.scale
        heading = np.pi - arr[:, 6] if self.flip_x else arr[:, 6]
        arr[:, 6] = wrap_angle(heading + self.rotation)
        return arr

    def apply_boxes(self, boxes):
        if not boxes:
            return []
        arr = self.apply_box_array(boxes_to_array(boxes))
        return [Box3D.from_array(row, b.class_id, b.score, b.pseudo) for row, b in zip(arr, boxes)]


IDENTITY = PoseTransform()


def apply_transform(t: PoseTransform, points, boxes):
    """Map points and boxes through ``t``; returns ``(points, boxes)``."""
    return t.apply_points(points), t.apply_boxes(list(boxes))
