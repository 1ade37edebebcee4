# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy reference kernels.

Accumulation order and expression order match reference.py exactly (the build
disables FP contraction), so results are bit-identical to the fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, sin

cnp.import_array()

BACKEND = "native"

from ..errors import ShapeError


def _canonical_order(seg_ids, values):
    keys = [values[:, j] for j in range(values.shape[1] - 1, -1, -1)]
    keys.append(seg_ids)
    return np.lexsort(keys)


def _check_segments(seg_ids, values, n_segments):
    if values.ndim != 2:
        raise ShapeError("segment values must be (N, D)")
    if seg_ids.shape != (values.shape[0],):
        raise ShapeError("segment ids must be (N,)")
    if seg_ids.size and (seg_ids.min() < 0 or seg_ids.max() >= n_segments):
        raise ShapeError("segment id out of range")


def segment_sum(seg_ids, values, int n_segments):
    """Per-segment sums in float64; rows are accumulated in canonical order."""
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    _check_segments(seg_ids, values, n_segments)
    out = np.zeros((n_segments, values.shape[1]))
    if seg_ids.size == 0:
        return out
    order = _canonical_order(seg_ids, values)
    cdef cnp.int64_t[::1] ids = np.ascontiguousarray(seg_ids[order])
    cdef double[:, ::1] vals = np.ascontiguousarray(values[order])
    cdef double[:, ::1] acc = out
    cdef Py_ssize_t i, j, n = ids.shape[0], d = vals.shape[1]
    cdef cnp.int64_t s
    for i in range(n):
        s = ids[i]
        for j in range(d):
            acc[s, j] += vals[i, j]
    return out


def segment_count(seg_ids, int n_segments):
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    out = np.zeros(n_segments, dtype=np.int64)
    cdef cnp.int64_t[::1] ids = seg_ids
    cdef cnp.int64_t[::1] cnt = out
    cdef Py_ssize_t i
    for i in range(ids.shape[0]):
        cnt[ids[i]] += 1
    return out


def segment_mean(seg_ids, values, int n_segments):
    """Per-segment means; empty segments are zero rows."""
    sums = segment_sum(seg_ids, values, n_segments)
    counts = segment_count(np.ascontiguousarray(seg_ids, dtype=np.int64), n_segments)
    denom = np.maximum(counts, 1).astype(np.float64)
    return sums / denom[:, None]


def segment_max(seg_ids, values, int n_segments, double empty_fill=0.0):
    """Per-segment elementwise max; empty segments get `empty_fill`."""
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    _check_segments(seg_ids, values, n_segments)
    out = np.full((n_segments, values.shape[1]), -np.inf)
    cdef cnp.int64_t[::1] ids = seg_ids
    cdef double[:, ::1] vals = values
    cdef double[:, ::1] acc = out
    cdef Py_ssize_t i, j, n = ids.shape[0], d = vals.shape[1]
    cdef cnp.int64_t s
    for i in range(n):
        s = ids[i]
        for j in range(d):
            if vals[i, j] > acc[s, j]:
                acc[s, j] = vals[i, j]
    counts = segment_count(seg_ids, n_segments)
    out[counts == 0] = empty_fill
    return out


def points_in_any_box(xy_z, boxes, double margin=0.0):
    """(N,) bool mask: point inside at least one yaw-oriented box."""
    pts = np.ascontiguousarray(xy_z, dtype=np.float64)
    bxs = np.ascontiguousarray(boxes, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    if bxs.ndim != 2 or bxs.shape[1] != 7:
        raise ShapeError("boxes must be (M, 7)")
    mask = np.zeros(pts.shape[0], dtype=np.uint8)
    cdef double[:, ::1] p = pts
    cdef double[:, ::1] b = bxs
    cdef cnp.uint8_t[::1] m = mask
    cdef Py_ssize_t i, k, n = p.shape[0], nb = b.shape[0]
    cdef double c, s, dx, dy, dz, bx, by, hx, hy, hz
    for k in range(nb):
        c = cos(b[k, 6])
        s = sin(b[k, 6])
        hx = b[k, 3] / 2.0 + margin
        hy = b[k, 4] / 2.0 + margin
        hz = b[k, 5] / 2.0 + margin
        for i in range(n):
            if m[i]:
                continue
            dx = p[i, 0] - b[k, 0]
            dy = p[i, 1] - b[k, 1]
            dz = p[i, 2] - b[k, 2]
            bx = c * dx + s * dy
            by = -s * dx + c * dy
            if fabs(bx) <= hx and fabs(by) <= hy and fabs(dz) <= hz:
                m[i] = 1
    return mask.astype(bool)


cdef void _rect_corners(double cx, double cy, double l, double w, double yaw,
                        double* px, double* py) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double lx[4]
    cdef double ly[4]
    lx[0] = l / 2;  ly[0] = w / 2
    lx[1] = -l / 2; ly[1] = w / 2
    lx[2] = -l / 2; ly[2] = -w / 2
    lx[3] = l / 2;  ly[3] = -w / 2
    cdef int i
    for i in range(4):
        px[i] = lx[i] * c - ly[i] * s + cx
        py[i] = lx[i] * s + ly[i] * c + cy


cdef double _clip_area(double* ax, double* ay, double* bx, double* by) noexcept nogil:
    # Sutherland-Hodgman clip of quad A by quad B, then the shoelace area.
    cdef double inx[16]
    cdef double iny[16]
    cdef double outx[16]
    cdef double outy[16]
    cdef int n = 4, m, e, i, j
    cdef double e0x, e0y, e1x, e1y, dp, dq, t, px, py, qx, qy, area
    for i in range(4):
        inx[i] = ax[i]
        iny[i] = ay[i]
    for e in range(4):
        e0x = bx[e]; e0y = by[e]
        e1x = bx[(e + 1) % 4]; e1y = by[(e + 1) % 4]
        m = 0
        for i in range(n):
            j = (i + 1) % n
            px = inx[i]; py = iny[i]
            qx = inx[j]; qy = iny[j]
            dp = (e1x - e0x) * (py - e0y) - (e1y - e0y) * (px - e0x)
            dq = (e1x - e0x) * (qy - e0y) - (e1y - e0y) * (qx - e0x)
            if dp >= 0.0:
                outx[m] = px; outy[m] = py
                m += 1
            if (dp > 0.0 and dq < 0.0) or (dp < 0.0 and dq > 0.0):
                t = dp / (dp - dq)
                outx[m] = px + t * (qx - px)
                outy[m] = py + t * (qy - py)
                m += 1
        n = m
        if n == 0:
            return 0.0
        for i in range(n):
            inx[i] = outx[i]
            iny[i] = outy[i]
    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += inx[i] * iny[j] - inx[j] * iny[i]
    return fabs(area) * 0.5


def rotated_rect_intersection(a, b):
    """Overlap area of two [cx, cy, l, w, yaw] rectangles via polygon clipping."""
    cdef double[::1] ra = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] rb = np.ascontiguousarray(b, dtype=np.float64)
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    _rect_corners(ra[0], ra[1], ra[2], ra[3], ra[4], ax, ay)
    _rect_corners(rb[0], rb[1], rb[2], rb[3], rb[4], bx, by)
    return _clip_area(ax, ay, bx, by)


def rotated_iou_matrix(boxes_a, boxes_b):
    """(Ma, Mb) BEV IoU between two stacks of [cx, cy, l, w, yaw] rows."""
    a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 5 or b.ndim != 2 or b.shape[1] != 5:
        raise ShapeError("rotated boxes must be (M, 5) rows [cx, cy, l, w, yaw]")
    out = np.zeros((a.shape[0], b.shape[0]))
    cdef double[:, ::1] av = a
    cdef double[:, ::1] bv = b
    cdef double[:, ::1] ov = out
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef Py_ssize_t i, j
    cdef double inter, union_, area_a, area_b
    for i in range(av.shape[0]):
        _rect_corners(av[i, 0], av[i, 1], av[i, 2], av[i, 3], av[i, 4], ax, ay)
        area_a = av[i, 2] * av[i, 3]
        for j in range(bv.shape[0]):
            _rect_corners(bv[j, 0], bv[j, 1], bv[j, 2], bv[j, 3], bv[j, 4], bx, by)
            area_b = bv[j, 2] * bv[j, 3]
            inter = _clip_area(ax, ay, bx, by)
            union_ = area_a + area_b - inter
            ov[i, j] = inter / union_ if union_ > 0.0 else 0.0
    return out
