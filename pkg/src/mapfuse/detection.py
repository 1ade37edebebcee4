"""Detection head plumbing: targets, loss stack, box decoding, NMS, AP/APH.

Box regression channels per pillar: (dx, dy, dz, log l, log w, log h),
heading bin logits, one shared in-bin residual, then per-class segmentation
logits. Offsets are relative to the peak pillar's center; z is predicted
directly. Box terms are supervised at peak pillars only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .geom import Box3D, normalize_angle
from .nn import sigmoid
from .voxels import BevGridConfig, encode_keys_2d, keys_to_centers

DIMS_FLOOR = 1e-3  # decoded box dims are clamped here for the IoU surrogate


@dataclass(frozen=True)
class GroundTruth:
    box: Box3D
    class_id: int = 0


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int


@dataclass(frozen=True)
class LossConfig:
    lambda_hm: float = 1.0
    lambda_bbox: float = 2.0
    lambda_seg: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    seg_gamma: float = 2.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if min(self.lambda_hm, self.lambda_bbox, self.lambda_seg) < 0.0:
            raise ConfigError("loss weights must be non-negative")
        if self.smooth_l1_beta <= 0.0:
            raise ConfigError("smooth_l1_beta must be positive")


@dataclass(frozen=True)
class HeadLayout:
    """Channel bookkeeping for the flat head output."""

    n_classes: int = 1
    n_bins: int = 12

    @property
    def hm(self) -> slice:
        return slice(0, self.n_classes)

    @property
    def box(self) -> slice:
        return slice(self.n_classes, self.n_classes + 6)

    @property
    def bins(self) -> slice:
        return slice(self.n_classes + 6, self.n_classes + 6 + self.n_bins)

    @property
    def residual(self) -> int:
        return self.n_classes + 6 + self.n_bins

    @property
    def seg(self) -> slice:
        return slice(self.n_classes + 7 + self.n_bins, 2 * self.n_classes + 7 + self.n_bins)

    @property
    def out_dim(self) -> int:
        return 2 * self.n_classes + 7 + self.n_bins


def filter_boxes_by_points(xyz: np.ndarray, gts, min_points: int = 5):
    """Ground-truth boxes supported by at least min_points lidar returns."""
    kept = []
    for gt in gts:
        mask = kernels.points_in_any_box(xyz, gt.box.as_array()[None, :], 0.0)
        if int(mask.sum()) >= min_points:
            kept.append(gt)
    return kept


def gaussian_radius(length_cells: float, width_cells: float, min_overlap: float = 0.7) -> int:
    """Heatmap radius so any same-size box within it keeps the IoU overlap."""
    h, w = float(length_cells), float(width_cells)
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4.0 * a1 * c1, 0.0))) / (2.0 * a1)
    a2 = 4.0
    b2 = 2.0 * (h + w)
    c2 = (1.0 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 4.0 * a2 * c2, 0.0))) / (2.0 * a2)
    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (h + w)
    c3 = (min_overlap - 1.0) * w * h
    r3 = (b3 + math.sqrt(max(b3 * b3 - 4.0 * a3 * c3, 0.0))) / (2.0 * a3)
    return max(2, int(min(r1, r2, r3)))


def heading_to_bin(theta: float, n_bins: int):
    """(bin index, residual); bins of width 2pi/n centered at 2pi*k/n."""
    width = 2.0 * math.pi / n_bins
    k = int(round(theta / width)) % n_bins
    center = normalize_angle(k * width)
    return k, normalize_angle(theta - center)


def bin_to_heading(k: int, residual: float, n_bins: int) -> float:
    width = 2.0 * math.pi / n_bins
    return normalize_angle(normalize_angle(k * width) + residual)


@dataclass(frozen=True)
class Targets:
    """Supervision tensors aligned with one sample's pillar rows."""

    heatmap: np.ndarray  # (C, K) in [0, 1]
    seg: np.ndarray  # (C, K) binary
    peak_rows: np.ndarray  # (P,) pillar row per supervised box
    peak_class: np.ndarray  # (P,)
    reg: np.ndarray  # (P, 6) dx dy dz logl logw logh
    bin_idx: np.ndarray  # (P,)
    bin_res: np.ndarray  # (P,)
    gt_yaw: np.ndarray  # (P,)
    gt_bev: np.ndarray  # (P, 4) cx cy l w, for the IoU surrogate
    num_unplaceable: int = 0


def make_targets(gts, keys: np.ndarray, config: BevGridConfig, layout: HeadLayout) -> Targets:
    """Heatmap/box/seg supervision on the sample's occupied pillars.

    Boxes whose center pillar is unoccupied snap to the nearest occupied
    pillar within the heatmap radius; boxes with no pillar in reach are
    dropped from supervision (counted, not an error).
    """
    k = keys.shape[0]
    c = layout.n_classes
    heatmap = np.zeros((c, k))
    seg = np.zeros((c, k))
    codes = encode_keys_2d(keys) if k else np.zeros(0, dtype=np.int64)
    centers = keys_to_centers(keys, config.voxel_size) if k else np.zeros((0, 2))
    vs = config.voxel_size

    rows, classes, regs, bins, residuals, yaws, gt_bev = [], [], [], [], [], [], []
    unplaceable = 0

    def row_of(cell):
        code = encode_keys_2d(np.asarray([cell], dtype=np.int64))[0]
        pos = np.searchsorted(codes, code)
        if pos < codes.size and codes[pos] == code:
            return int(pos)
        return -1

    for gt in gts:
        b = gt.box
        if gt.class_id < 0 or gt.class_id >= c:
            raise ConfigError(f"class id {gt.class_id} outside [0, {c})")

        # Segmentation: pillar centers inside the BEV footprint.
        if k:
            d = centers - b.center[:2]
            cy, sy = math.cos(b.yaw), math.sin(b.yaw)
            bx = cy * d[:, 0] + sy * d[:, 1]
            by = -sy * d[:, 0] + cy * d[:, 1]
            inside = (np.abs(bx) <= b.dims[0] / 2.0) & (np.abs(by) <= b.dims[1] / 2.0)
            seg[gt.class_id] = np.maximum(seg[gt.class_id], inside.astype(np.float64))

        radius = gaussian_radius(b.dims[0] / vs, b.dims[1] / vs)
        cell = np.floor(b.center[:2] / vs).astype(np.int64)

        peak = row_of(cell)
        if peak < 0 and k:
            # Nearest occupied pillar within the radius, ties to the smaller key.
            best = None
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    r = row_of(cell + np.array([di, dj]))
                    if r < 0:
                        continue
                    dist = di * di + dj * dj
                    cand = (dist, codes[r], r)
                    if best is None or cand < best:
                        best = cand
            if best is not None:
                peak = best[2]
        if peak < 0:
            unplaceable += 1
            continue

        # Gaussian bump around the true center cell, max-combined.
        sigma = (2.0 * radius + 1.0) / 6.0
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                r = row_of(cell + np.array([di, dj]))
                if r < 0:
                    continue
                val = math.exp(-(di * di + dj * dj) / (2.0 * sigma * sigma))
                if val > heatmap[gt.class_id, r]:
                    heatmap[gt.class_id, r] = val
        heatmap[gt.class_id, peak] = 1.0

        peak_center = centers[peak]
        rows.append(peak)
        classes.append(gt.class_id)
        regs.append(
            [
                b.center[0] - peak_center[0],
                b.center[1] - peak_center[1],
                b.center[2],
                math.log(b.dims[0]),
                math.log(b.dims[1]),
                math.log(b.dims[2]),
            ]
        )
        bi, res = heading_to_bin(b.yaw, layout.n_bins)
        bins.append(bi)
        residuals.append(res)
        yaws.append(b.yaw)
        gt_bev.append([b.center[0], b.center[1], b.dims[0], b.dims[1]])

    return Targets(
        heatmap,
        seg,
        np.asarray(rows, dtype=np.int64),
        np.asarray(classes, dtype=np.int64),
        np.asarray(regs, dtype=np.float64).reshape(-1, 6),
        np.asarray(bins, dtype=np.int64),
        np.asarray(residuals, dtype=np.float64),
        np.asarray(yaws, dtype=np.float64),
        np.asarray(gt_bev, dtype=np.float64).reshape(-1, 4),
        unplaceable,
    )


# --- loss terms --------------------------------------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _focal_pos(x, exponent):
    """Value and d/dx of -(1-p)^e * log p, elementwise, p = sigmoid(x)."""
    p = sigmoid(x)
    q = sigmoid(-x)
    logp = _log_sigmoid(x)
    qe = q**exponent
    loss = -qe * logp
    grad = exponent * p * qe * logp - q ** (exponent + 1.0)
    return loss, grad


def focal_heatmap_loss(logits: np.ndarray, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced focal loss, normalized by the peak count (min 1).

    Peaks are the exact-1 targets; everywhere else the penalty weight
    (1 - t)^beta tempers the negative loss near peaks.
    """
    if logits.shape != target.shape:
        raise ShapeError("heatmap logits and targets must share a shape")
    pos = target == 1.0
    n_pos = max(int(pos.sum()), 1)
    grad = np.zeros_like(logits)

    loss = 0.0
    if pos.any():
        lp, gp = _focal_pos(logits[pos], alpha)
        loss += lp.sum()
        grad[pos] = gp
    neg = ~pos
    if neg.any():
        x = logits[neg]
        p = sigmoid(x)
        q = sigmoid(-x)
        log1mp = _log_sigmoid(-x)
        w = (1.0 - target[neg]) ** beta
        loss += (-w * p**alpha * log1mp).sum()
        grad[neg] = w * (p ** (alpha + 1.0) - alpha * p**alpha * q * log1mp)
    return loss / n_pos, grad / n_pos


def smooth_l1(x: np.ndarray, beta: float = 1.0):
    """Elementwise Huber-style value and gradient."""
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return val, grad


def heading_bin_loss(bin_logits: np.ndarray, res_pred: np.ndarray, theta_gt: np.ndarray, n_bins: int = 12, beta: float = 1.0):
    """Cross-entropy over bins plus smooth-L1 on the true bin's residual.

    Targets are encoded from theta_gt here. Returns (loss, dlogits, dres);
    both terms are means over the P boxes.
    """
    p = bin_logits.shape[0]
    if bin_logits.shape[1] != n_bins:
        raise ShapeError(f"expected {n_bins} bin logit columns, got {bin_logits.shape[1]}")
    if p == 0:
        return 0.0, np.zeros_like(bin_logits), np.zeros_like(res_pred)
    encoded = [heading_to_bin(float(t), n_bins) for t in np.asarray(theta_gt)]
    bin_idx = np.array([e[0] for e in encoded], dtype=np.int64)
    res_target = np.array([e[1] for e in encoded])
    m = bin_logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(bin_logits - m).sum(axis=1))
    ce = lse - bin_logits[np.arange(p), bin_idx]
    soft = np.exp(bin_logits - lse[:, None])
    dlogits = soft
    dlogits[np.arange(p), bin_idx] -= 1.0
    dlogits /= p

    diff = res_pred - res_target
    val, grad = smooth_l1(diff, beta)
    return ce.mean() + val.mean(), dlogits, grad / p


def iou_loss(pred_xy: np.ndarray, pred_lw: np.ndarray, gt_bev: np.ndarray):
    """1 - axis-aligned BEV IoU, differentiable surrogate (yaw ignored).

    Disjoint pairs contribute loss 1 with zero gradient. Returns
    (mean loss, d/dpred_xy, d/dpred_lw).
    """
    p = pred_xy.shape[0]
    if p == 0:
        return 0.0, np.zeros_like(pred_xy), np.zeros_like(pred_lw)
    gx, gy, gl, gw = gt_bev[:, 0], gt_bev[:, 1], gt_bev[:, 2], gt_bev[:, 3]
    px, py = pred_xy[:, 0], pred_xy[:, 1]
    pl, pw = pred_lw[:, 0], pred_lw[:, 1]

    r_p, l_p = px + pl / 2.0, px - pl / 2.0
    r_g, l_g = gx + gl / 2.0, gx - gl / 2.0
    t_p, b_p = py + pw / 2.0, py - pw / 2.0
    t_g, b_g = gy + gw / 2.0, gy - gw / 2.0

    ox = np.minimum(r_p, r_g) - np.maximum(l_p, l_g)
    oy = np.minimum(t_p, t_g) - np.maximum(b_p, b_g)
    wx = np.maximum(ox, 0.0)
    wy = np.maximum(oy, 0.0)
    inter = wx * wy
    union = pl * pw + gl * gw - inter
    iou = np.where(union > 0.0, inter / np.maximum(union, 1e-12), 0.0)
    loss = float(np.mean(1.0 - iou))

    live = (wx > 0.0) & (wy > 0.0)
    diou_dinter = (union + inter) / np.maximum(union * union, 1e-12)
    diou_darea = -inter / np.maximum(union * union, 1e-12)

    # Interval endpoint subgradients: which side is active.
    dox_dpx = np.where(r_p <= r_g, 1.0, 0.0) - np.where(l_p >= l_g, 1.0, 0.0)
    dox_dpl = 0.5 * np.where(r_p <= r_g, 1.0, 0.0) + 0.5 * np.where(l_p >= l_g, 1.0, 0.0)
    doy_dpy = np.where(t_p <= t_g, 1.0, 0.0) - np.where(b_p >= b_g, 1.0, 0.0)
    doy_dpw = 0.5 * np.where(t_p <= t_g, 1.0, 0.0) + 0.5 * np.where(b_p >= b_g, 1.0, 0.0)

    dinter_dpx = wy * dox_dpx
    dinter_dpy = wx * doy_dpy
    dinter_dpl = wy * dox_dpl
    dinter_dpw = wx * doy_dpw

    scale = -live.astype(np.float64) / p  # d mean(1-iou) / d iou = -1/P where live
    dxy = np.stack(
        [scale * diou_dinter * dinter_dpx, scale * diou_dinter * dinter_dpy], axis=1
    )
    dlw = np.stack(
        [
            scale * (diou_dinter * dinter_dpl + diou_darea * pw),
            scale * (diou_dinter * dinter_dpw + diou_darea * pl),
        ],
        axis=1,
    )
    return loss, dxy, dlw


def seg_focal_loss(logits: np.ndarray, target: np.ndarray, gamma: float = 2.0):
    """Binary focal loss, mean over entries; target is 0/1."""
    if logits.shape != target.shape:
        raise ShapeError("segmentation logits and targets must share a shape")
    n = max(logits.size, 1)
    pos = target >= 0.5
    loss = 0.0
    grad = np.zeros_like(logits)
    if pos.any():
        lp, gp = _focal_pos(logits[pos], gamma)
        loss += lp.sum()
        grad[pos] = gp
    neg = ~pos
    if neg.any():
        ln, gn = _focal_pos(-logits[neg], gamma)
        loss += ln.sum()
        grad[neg] = -gn
    return loss / n, grad / n


@dataclass
class LossBreakdown:
    total: float = 0.0
    hm: float = 0.0
    bbox: float = 0.0
    seg: float = 0.0


def total_loss(
    head_out: np.ndarray,
    targets: Targets,
    keys: np.ndarray,
    config: BevGridConfig,
    layout: HeadLayout,
    cfg: LossConfig = LossConfig(),
):
    """Weighted per-class sum of heatmap, box and segmentation losses.

    Box terms (smooth-L1 on the 6 regression channels, heading bin loss,
    axis-aligned IoU surrogate) apply at peak pillars only. Returns
    (breakdown, d loss / d head_out).
    """
    if head_out.ndim != 2 or head_out.shape[1] != layout.out_dim:
        raise ShapeError(f"head output must be (K, {layout.out_dim})")
    dhead = np.zeros_like(head_out)
    out = LossBreakdown()

    for c in range(layout.n_classes):
        hm_col = layout.hm.start + c
        hloss, hgrad = focal_heatmap_loss(head_out[:, hm_col], targets.heatmap[c], cfg.focal_alpha, cfg.focal_beta)
        out.hm += hloss
        dhead[:, hm_col] += cfg.lambda_hm * hgrad

        seg_col = layout.seg.start + c
        sloss, sgrad = seg_focal_loss(head_out[:, seg_col], targets.seg[c], cfg.seg_gamma)
        out.seg += sloss
        dhead[:, seg_col] += cfg.lambda_seg * sgrad

        sel = np.flatnonzero(targets.peak_class == c)
        if sel.size == 0:
            continue
        rows = targets.peak_rows[sel]
        p = sel.size
        reg_pred = head_out[np.ix_(rows, range(layout.box.start, layout.box.stop))]
        diff = reg_pred - targets.reg[sel]
        val, grad = smooth_l1(diff, cfg.smooth_l1_beta)
        smooth_loss = float(val.sum(axis=1).mean())
        dreg = grad / p

        blogits = head_out[np.ix_(rows, range(layout.bins.start, layout.bins.stop))]
        res = head_out[rows, layout.residual]
        bin_loss, dbl, dres = heading_bin_loss(blogits, res, targets.gt_yaw[sel], layout.n_bins, cfg.smooth_l1_beta)

        centers = keys_to_centers(keys[rows], config.voxel_size)
        pred_xy = centers + reg_pred[:, 0:2]
        raw_lw = np.exp(reg_pred[:, 3:5])
        pred_lw = np.maximum(raw_lw, DIMS_FLOOR)
        ious_loss, dxy, dlw = iou_loss(pred_xy, pred_lw, targets.gt_bev[sel])
        dreg[:, 0:2] += dxy
        dreg[:, 3:5] += dlw * np.where(raw_lw > DIMS_FLOOR, raw_lw, 0.0)

        bbox_loss = smooth_loss + bin_loss + ious_loss
        out.bbox += bbox_loss

        scaled = cfg.lambda_bbox
        for j, col in enumerate(range(layout.box.start, layout.box.stop)):
            np.add.at(dhead[:, col], rows, scaled * dreg[:, j])
        for j, col in enumerate(range(layout.bins.start, layout.bins.stop)):
            np.add.at(dhead[:, col], rows, scaled * dbl[:, j])
        np.add.at(dhead[:, layout.residual], rows, scaled * dres)

    out.total = cfg.lambda_hm * out.hm + cfg.lambda_bbox * out.bbox + cfg.lambda_seg * out.seg
    return out, dhead


# --- decode / NMS / evaluation ------------------------------------------------


def decode_boxes(
    head_out: np.ndarray,
    keys: np.ndarray,
    config: BevGridConfig,
    layout: HeadLayout,
    score_threshold: float = 0.3,
):
    """Detections for every (pillar, class) whose heatmap score clears the bar.

    Ordered by descending score, then key code, then class, so output order is deterministic.
    """
    dets = []
    if head_out.shape[0] == 0:
        return dets
    scores = sigmoid(head_out[:, layout.hm])
    centers = keys_to_centers(keys, config.voxel_size)
    codes = encode_keys_2d(keys)
    bins = head_out[:, layout.bins]
    best_bin = np.argmax(bins, axis=1)
    rows, cols = np.nonzero(scores > score_threshold)
    for r, c in zip(rows, cols):
        reg = head_out[r, layout.box]
        center = np.array([centers[r, 0] + reg[0], centers[r, 1] + reg[1], reg[2]])
        dims = np.maximum(np.exp(reg[3:6]), DIMS_FLOOR)
        yaw = bin_to_heading(int(best_bin[r]), float(head_out[r, layout.residual]), layout.n_bins)
        dets.append(Detection(Box3D(center, dims, yaw), float(scores[r, c]), int(c)))
    order = sorted(
        range(len(dets)),
        key=lambda i: (-scores[rows[i], cols[i]], codes[rows[i]], cols[i]),
    )
    return [dets[i] for i in order]


def iou_bev_rotated(a: Box3D, b: Box3D) -> float:
    """Exact rotated BEV IoU via polygon clipping."""
    ra = np.array([a.center[0], a.center[1], a.dims[0], a.dims[1], a.yaw])
    rb = np.array([b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw])
    inter = kernels.rotated_rect_intersection(ra, rb)
    union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter
    return inter / union if union > 0.0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated BEV intersection times vertical overlap, over the volume union."""
    ra = np.array([a.center[0], a.center[1], a.dims[0], a.dims[1], a.yaw])
    rb = np.array([b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw])
    inter_bev = kernels.rotated_rect_intersection(ra, rb)
    za0, za1 = a.center[2] - a.dims[2] / 2.0, a.center[2] + a.dims[2] / 2.0
    zb0, zb1 = b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * dz
    vol = a.dims.prod() + b.dims.prod() - inter
    return inter / vol if vol > 0.0 else 0.0


def nms_bev(dets, iou_threshold: float = 0.5):
    """Greedy rotated-BEV NMS; input order must already be score-descending."""
    if len(dets) <= 1:
        return list(dets)
    boxes = np.array([[d.box.center[0], d.box.center[1], d.box.dims[0], d.box.dims[1], d.box.yaw] for d in dets])
    iou = kernels.rotated_iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(dets), dtype=bool)
    for i in range(len(dets)):
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= (iou[i] > iou_threshold) & (np.arange(len(dets)) > i)
    return keep


@dataclass(frozen=True)
class EvalResult:
    ap: float
    aph: float
    per_class: dict = field(default_factory=dict)


def evaluate_ap(dets, gts, iou_threshold: float = 0.7, use_3d: bool = True) -> EvalResult:
    """Greedy-matching AP and heading-weighted APH.

    Accepts one frame (flat lists) or many (list of per-frame lists). The
    heading weight max(0, 1 - |dtheta|/pi) discounts true positives in both
    the precision and recall numerators, so APH <= AP.
    """
    det_frames, gt_frames = _as_frames(dets, gts)
    class_ids = sorted({g.class_id for frame in gt_frames for g in frame})
    per_class = {}
    for cid in class_ids:
        per_class[cid] = _single_class_ap(det_frames, gt_frames, cid, iou_threshold, use_3d)
    if not per_class:
        return EvalResult(0.0, 0.0, {})
    ap = float(np.mean([v[0] for v in per_class.values()]))
    aph = float(np.mean([v[1] for v in per_class.values()]))
    return EvalResult(ap, aph, per_class)


def _as_frames(dets, gts):
    det_frames = [dets] if (len(dets) == 0 or isinstance(dets[0], Detection)) else [list(f) for f in dets]
    gt_frames = [gts] if (len(gts) == 0 or isinstance(gts[0], GroundTruth)) else [list(f) for f in gts]
    if len(det_frames) == 1 and len(gt_frames) > 1:
        raise ShapeError("frame counts of detections and ground truth differ")
    if len(det_frames) != len(gt_frames):
        raise ShapeError("frame counts of detections and ground truth differ")
    return det_frames, gt_frames


def _single_class_ap(det_frames, gt_frames, cid, iou_threshold, use_3d):
    iou_fn = iou_3d if use_3d else iou_bev_rotated
    records = []  # (score, frame, det index, tp flag, heading weight)
    n_gt = 0
    for f, (dets, gts) in enumerate(zip(det_frames, gt_frames)):
        gts = [g for g in gts if g.class_id == cid]
        n_gt += len(gts)
        dets = [d for d in dets if d.class_id == cid]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        matched = [False] * len(gts)
        for i in order:
            det = dets[i]
            best, best_iou = -1, iou_threshold
            for j, gt in enumerate(gts):
                if matched[j]:
                    continue
                v = iou_fn(det.box, gt.box)
                if v >= best_iou:
                    best, best_iou = j, v
            if best >= 0:
                matched[best] = True
                dtheta = abs(normalize_angle(det.box.yaw - gts[best].box.yaw))
                records.append((det.score, f, i, 1.0, max(0.0, 1.0 - dtheta / math.pi)))
            else:
                records.append((det.score, f, i, 0.0, 0.0))
    if n_gt == 0:
        return (0.0, 0.0)
    if not records:
        return (0.0, 0.0)
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.array([r[3] for r in records])
    hw = np.array([r[4] for r in records])
    cum_tp = np.cumsum(tp)
    cum_hw = np.cumsum(hw)
    ranks = np.arange(1, len(records) + 1, dtype=np.float64)
    ap = _envelope_area(cum_tp / n_gt, cum_tp / ranks)
    aph = _envelope_area(cum_hw / n_gt, cum_hw / ranks)
    return (ap, aph)


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))
