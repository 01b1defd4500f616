"""Pure numpy/Python implementations of the hot kernels.

Same signatures and results as the compiled ``_core`` module; used when the
extension is not built.
"""
from __future__ import annotations

import math

import numpy as np


def fps(points, count, start):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    out = np.empty(count, dtype=np.int64)
    if count == 0:
        return out
    dist = np.full(n, np.inf)
    cur = int(start)
    for i in range(count):
        out[i] = cur
        d = points - points[cur]
        d = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        np.minimum(dist, d, out=dist)
        cur = int(np.argmax(dist))
    return out


def ball_query(centers, points, radius, nsample):
    """First ``nsample`` point indices (by index order) within ``radius`` of each center.

    Rows with fewer hits are padded with their first hit; rows with no hit
    fall back to the nearest point.
    """
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    diff = centers[:, None, :] - points[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    within = d2 < radius * radius
    order = np.argsort(~within, axis=1, kind="stable")[:, :nsample]
    counts = within.sum(axis=1)
    nearest = d2.argmin(axis=1)
    first = np.where(counts > 0, order[:, 0], nearest)
    cols = np.arange(order.shape[1])[None, :]
    out = np.where(cols < counts[:, None], order, first[:, None])
    if out.shape[1] < nsample:
        pad = np.repeat(first[:, None], nsample - out.shape[1], axis=1)
        out = np.concatenate([out, pad], axis=1)
    return out.astype(np.int64)


def _footprint(b):
    cx, cy, dx, dy, h = b[0], b[1], b[3], b[4], b[6]
    c, s = math.cos(h), math.sin(h)
    hx, hy = 0.5 * dx, 0.5 * dy
    pts = []
    for ux, uy in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        pts.append((cx + c * ux - s * uy, cy + s * ux + c * uy))
    return pts


def _clip(subject, clipper):
    out = subject
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        k = len(inp)
        for j in range(k):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % k]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
                if sq < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
            elif sq >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _area(poly):
    a = 0.0
    k = len(poly)
    for j in range(k):
        x0, y0 = poly[j]
        x1, y1 = poly[(j + 1) % k]
        a += x0 * y1 - x1 * y0
    return 0.5 * abs(a)


def box_iou(a, b):
    """3D IoU of two [cx, cy, cz, dx, dy, dz, heading] boxes."""
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    inter_area = _area(_clip(_footprint(a), _footprint(b)))
    inter = inter_area * dz
    va = a[3] * a[4] * a[5]
    vb = b[3] * b[4] * b[5]
    union = va + vb - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = box_iou(a[i], b[j])
    return out


def nms(boxes, scores, threshold):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        for j in order[pos + 1:]:
            if not suppressed[j] and box_iou(boxes[i], boxes[j]) > threshold:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def group_max(values):
    """Max over axis 1 of a [R, S, F] array and the first index attaining it."""
    values = np.asarray(values, dtype=np.float64)
    arg = values.argmax(axis=1)
    out = np.take_along_axis(values, arg[:, None, :], axis=1)[:, 0, :]
    return out, arg
