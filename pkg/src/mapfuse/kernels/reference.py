"""Pure-numpy implementations of the hot kernels.

These are the fallback for the compiled extension and the ground truth the
native module is tested against. Every function here must produce bit-identical
output to its native twin.

Permutation invariance: the segment reductions sort rows into a canonical
within-segment order (lexicographic over the feature columns) before
accumulating, so reordering the input rows cannot change even the last ulp of
the result.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError

BACKEND = "python"


def _canonical_order(seg_ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Permutation sorting rows by (segment, feature columns right-to-left)."""
    keys = [values[:, j] for j in range(values.shape[1] - 1, -1, -1)]
    keys.append(seg_ids)
    return np.lexsort(keys)


def _check_segments(seg_ids: np.ndarray, values: np.ndarray, n_segments: int):
    if values.ndim != 2:
        raise ShapeError("segment values must be (N, D)")
    if seg_ids.shape != (values.shape[0],):
        raise ShapeError("segment ids must be (N,)")
    if seg_ids.size and (seg_ids.min() < 0 or seg_ids.max() >= n_segments):
        raise ShapeError("segment id out of range")


def segment_sum(seg_ids, values, n_segments: int) -> np.ndarray:
    """Per-segment sums in float64; rows are accumulated in canonical order."""
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    _check_segments(seg_ids, values, n_segments)
    out = np.zeros((n_segments, values.shape[1]))
    if seg_ids.size == 0:
        return out
    order = _canonical_order(seg_ids, values)
    np.add.at(out, seg_ids[order], values[order])
    return out


def segment_count(seg_ids, n_segments: int) -> np.ndarray:
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    return np.bincount(seg_ids, minlength=n_segments).astype(np.int64)


def segment_mean(seg_ids, values, n_segments: int) -> np.ndarray:
    """Per-segment means; empty segments are zero rows."""
    sums = segment_sum(seg_ids, values, n_segments)
    counts = segment_count(np.ascontiguousarray(seg_ids, dtype=np.int64), n_segments)
    denom = np.maximum(counts, 1).astype(np.float64)
    return sums / denom[:, None]


def segment_max(seg_ids, values, n_segments: int, empty_fill: float = 0.0) -> np.ndarray:
    """Per-segment elementwise max; empty segments get `empty_fill`."""
    seg_ids = np.ascontiguousarray(seg_ids, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    _check_segments(seg_ids, values, n_segments)
    out = np.full((n_segments, values.shape[1]), -np.inf)
    if seg_ids.size:
        np.maximum.at(out, seg_ids, values)
    counts = segment_count(seg_ids, n_segments)
    out[counts == 0] = empty_fill
    return out


def points_in_any_box(xy_z: np.ndarray, boxes: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """(N,) bool mask: point inside at least one yaw-oriented box.

    `boxes` is (M, 7) rows of [cx, cy, cz, l, w, h, yaw]; each box is dilated
    by `margin` meters on every face.
    """
    pts = np.ascontiguousarray(xy_z, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    if boxes.ndim != 2 or boxes.shape[1] != 7:
        raise ShapeError("boxes must be (M, 7)")
    mask = np.zeros(pts.shape[0], dtype=bool)
    for b in boxes:
        d = pts - b[:3]
        c, s = math.cos(float(b[6])), math.sin(float(b[6]))
        bx = c * d[:, 0] + s * d[:, 1]
        by = -s * d[:, 0] + c * d[:, 1]
        half = b[3:6] / 2.0 + margin
        inside = (np.abs(bx) <= half[0]) & (np.abs(by) <= half[1]) & (np.abs(d[:, 2]) <= half[2])
        mask |= inside
    return mask


def _clip_polygon(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of `poly` left of the directed edge a -> b."""
    edge = b - a
    out = []
    n = poly.shape[0]
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        dq = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if dp >= 0.0:
            out.append(p)
        if (dp > 0.0 and dq < 0.0) or (dp < 0.0 and dq > 0.0):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    if not out:
        return np.zeros((0, 2))
    return np.asarray(out)


def _polygon_area(poly: np.ndarray) -> float:
    # Sequential shoelace accumulation, kept in lockstep with the compiled twin.
    n = poly.shape[0]
    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return abs(area) * 0.5


def _rect_corners(cx, cy, l, w, yaw) -> np.ndarray:
    c, s = math.cos(float(yaw)), math.sin(float(yaw))
    lx = np.array([l / 2, -l / 2, -l / 2, l / 2])
    ly = np.array([w / 2, w / 2, -w / 2, -w / 2])
    return np.stack([lx * c - ly * s + cx, lx * s + ly * c + cy], axis=1)


def rotated_rect_intersection(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap area of two [cx, cy, l, w, yaw] rectangles via polygon clipping."""
    pa = _rect_corners(*a)
    pb = _rect_corners(*b)
    poly = pa
    for i in range(4):
        poly = _clip_polygon(poly, pb[i], pb[(i + 1) % 4])
        if poly.shape[0] == 0:
            return 0.0
    return _polygon_area(poly)


def rotated_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(Ma, Mb) BEV IoU between two stacks of [cx, cy, l, w, yaw] rows."""
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    if boxes_a.ndim != 2 or boxes_a.shape[1] != 5 or boxes_b.ndim != 2 or boxes_b.shape[1] != 5:
        raise ShapeError("rotated boxes must be (M, 5) rows [cx, cy, l, w, yaw]")
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    area_a = boxes_a[:, 2] * boxes_a[:, 3]
    area_b = boxes_b[:, 2] * boxes_b[:, 3]
    for i in range(boxes_a.shape[0]):
        for j in range(boxes_b.shape[0]):
            inter = rotated_rect_intersection(boxes_a[i], boxes_b[j])
            union = area_a[i] + area_b[j] - inter
            out[i, j] = inter / union if union > 0.0 else 0.0
    return out
