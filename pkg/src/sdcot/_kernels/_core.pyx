# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: farthest point sampling, ball query, rotated-box IoU, NMS.

Bit-for-bit the same arithmetic as ``_fallback`` wherever the fallback is
itself deterministic (FPS, ball query); IoU agrees to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, INFINITY

cnp.import_array()


def fps(points, Py_ssize_t count, Py_ssize_t start):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0]
    out_arr = np.empty(count, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    if count == 0:
        return out_arr
    dist_arr = np.full(n, np.inf)
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, cur = start, best
    cdef double dx, dy, dz, d, bestd, cx, cy, cz
    for i in range(count):
        out[i] = cur
        cx = p[cur, 0]
        cy = p[cur, 1]
        cz = p[cur, 2]
        best = 0
        bestd = -1.0
        for j in range(n):
            dx = p[j, 0] - cx
            dy = p[j, 1] - cy
            dz = p[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
            if dist[j] > bestd:
                bestd = dist[j]
                best = j
        cur = best
    return out_arr


def ball_query(centers, points, double radius, Py_ssize_t nsample):
    cdef double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t m = c.shape[0], n = p.shape[0]
    out_arr = np.empty((m, nsample), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, nearest
    cdef double r2 = radius * radius, dx, dy, dz, d, bestd
    for i in range(m):
        k = 0
        nearest = 0
        bestd = INFINITY
        for j in range(n):
            dx = c[i, 0] - p[j, 0]
            dy = c[i, 1] - p[j, 1]
            dz = c[i, 2] - p[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:
                bestd = d
                nearest = j
            if d < r2 and k < nsample:
                out[i, k] = j
                k += 1
        if k == 0:
            out[i, 0] = nearest
            k = 1
        for j in range(k, nsample):
            out[i, j] = out[i, 0]
    return out_arr


cdef void _footprint(double[::1] b, double* xs, double* ys) nogil:
    cdef double c = cos(b[6]), s = sin(b[6])
    cdef double hx = 0.5 * b[3], hy = 0.5 * b[4]
    cdef double ux[4]
    cdef double uy[4]
    ux[0] = hx; uy[0] = hy
    ux[1] = -hx; uy[1] = hy
    ux[2] = -hx; uy[2] = -hy
    ux[3] = hx; uy[3] = -hy
    cdef int k
    for k in range(4):
        xs[k] = b[0] + c * ux[k] - s * uy[k]
        ys[k] = b[1] + s * ux[k] + c * uy[k]


cdef double _inter_area(double* ax, double* ay, double* bx, double* by) nogil:
    # Sutherland-Hodgman: clip polygon a (4 verts) by convex CCW polygon b (4 verts)
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef int n = 4, m, i, j, jn
    cdef double ex, ey, sp, sq, t, x0, y0, x1, y1, area
    for i in range(4):
        px[i] = ax[i]
        py[i] = ay[i]
    for i in range(4):
        if n == 0:
            break
        ex = bx[(i + 1) % 4] - bx[i]
        ey = by[(i + 1) % 4] - by[i]
        m = 0
        for j in range(n):
            jn = (j + 1) % n
            sp = ex * (py[j] - by[i]) - ey * (px[j] - bx[i])
            sq = ex * (py[jn] - by[i]) - ey * (px[jn] - bx[i])
            if sp >= 0:
                qx[m] = px[j]
                qy[m] = py[j]
                m += 1
                if sq < 0:
                    t = sp / (sp - sq)
                    qx[m] = px[j] + t * (px[jn] - px[j])
                    qy[m] = py[j] + t * (py[jn] - py[j])
                    m += 1
            elif sq >= 0:
                t = sp / (sp - sq)
                qx[m] = px[j] + t * (px[jn] - px[j])
                qy[m] = py[j] + t * (py[jn] - py[j])
                m += 1
        n = m
        for j in range(n):
            px[j] = qx[j]
            py[j] = qy[j]
    area = 0.0
    for j in range(n):
        jn = (j + 1) % n
        area += px[j] * py[jn] - px[jn] * py[j]
    return 0.5 * fabs(area)


cdef double _iou(double[::1] a, double[::1] b):
    cdef double zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    cdef double zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    cdef double dz = zhi - zlo
    if dz <= 0:
        return 0.0
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    _footprint(a, ax, ay)
    _footprint(b, bx, by)
    cdef double inter = _inter_area(ax, ay, bx, by) * dz
    cdef double union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def box_iou(a, b):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    return _iou(av, bv)


def iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 7))
    cdef double[:, ::1] bv = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 7))
    out_arr = np.zeros((av.shape[0], bv.shape[0]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(av.shape[0]):
        for j in range(bv.shape[0]):
            out[i, j] = _iou(av[i], bv[j])
    return out_arr


def nms(boxes, scores, double threshold):
    cdef double[:, ::1] bv = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 7))
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    cdef Py_ssize_t n = bv.shape[0], a, c, i, j
    supp_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] supp = supp_arr
    keep = []
    for a in range(n):
        i = order[a]
        if supp[i]:
            continue
        keep.append(i)
        for c in range(a + 1, n):
            j = order[c]
            if not supp[j] and _iou(bv[i], bv[j]) > threshold:
                supp[j] = 1
    return np.asarray(keep, dtype=np.int64)


def group_max(values):
    """Max over axis 1 of a [R, S, F] array and the first index attaining it."""
    cdef double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t R = v.shape[0], S = v.shape[1], F = v.shape[2]
    out_arr = np.empty((R, F))
    arg_arr = np.empty((R, F), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t r, s, f
    cdef double x, m
    cdef cnp.int64_t a
    with nogil:
        for r in range(R):
            for f in range(F):
                m = v[r, 0, f]
                a = 0
                for s in range(1, S):
                    x = v[r, s, f]
                    if x > m:
                        m = x
                        a = s
                out[r, f] = m
                arg[r, f] = a
    return out_arr, arg_arr
