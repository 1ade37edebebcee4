"""Finite-difference verification of every hand-written backward pass.

Each entry builds a small random configuration, computes analytic gradients,
and compares them against central differences. The catalog is shared by the
CLI's check-grad subcommand and the test suite, so "the gradients are right"
means the same thing everywhere.

Test points are drawn to keep true gradients well above the h = 1e-5
finite-difference noise floor (logits clipped to moderate ranges, box pairs
kept overlapping); a vanishing gradient would otherwise drown in roundoff
and report a false mismatch. The end-to-end detector rows compare
directional derivatives instead of per-entry ratios for the same reason:
with a loss of magnitude ~10, central differences resolve nothing below
~1e-10 absolute, yet some individual weights legitimately carry ~1e-9
gradients through damped gate paths.
"""
from __future__ import annotations

import math

import numpy as np

from .detection import (
    GroundTruth,
    HeadLayout,
    LossConfig,
    focal_heatmap_loss,
    heading_bin_loss,
    iou_loss,
    make_targets,
    seg_focal_loss,
    smooth_l1,
    total_loss,
)
from .fusion import (
    aggregate_backward,
    aggregate_from_vox,
    concat_proj_spec,
    fuse_features,
    fuse_features_backward,
    make_fusion_specs,
)
from .geom import Box3D
from .model import Detector, ModelConfig
from .nn import (
    MlpSpec,
    _tensor_rng as _rng,
    finite_diff_check,
    init_mlp,
    mlp_backward,
    mlp_forward,
    zero_like_store,
)
from .voxels import BevGridConfig, dynamic_voxelize, encode_keys_2d

GRAD_TOLERANCE = 1e-4


def directional_diff_check(loss_fn, params, rng, h: float = 1e-5, n_dirs: int = 6) -> float:
    """Central differences along gradient-anchored directions in parameter space.

    Compares <grad, u> against (f(x + h u) - f(x - h u)) / 2h. Each direction
    is the analytic gradient plus a random perturbation of a quarter of its
    norm, so the projected quantities live at gradient-norm scale (which keeps
    finite-difference truncation and roundoff subdominant) while the random
    component sweeps the orthogonal complement across draws. A wrong gradient
    shows up at full scale along its own direction; every tensor moves
    jointly, exercising the same accumulation paths a per-entry sweep would.
    """
    _, grads = loss_fn(params)
    names = sorted(params)
    gnorm = math.sqrt(sum(float((grads[n] * grads[n]).sum()) for n in names))
    worst = 0.0
    for _ in range(n_dirs):
        vs = {n: rng.normal(size=params[n].shape) for n in names}
        rnorm = math.sqrt(sum(float((v * v).sum()) for v in vs.values()))
        for n in names:
            vs[n] = grads[n] + (0.25 * gnorm / rnorm) * vs[n]
        norm = math.sqrt(sum(float((v * v).sum()) for v in vs.values()))
        analytic = sum(float((grads[n] * vs[n]).sum()) for n in names) / norm
        saved = {n: params[n].copy() for n in names}
        for n in names:
            params[n] += (h / norm) * vs[n]
        up, _ = loss_fn(params)
        for n in names:
            params[n][...] = saved[n] - (h / norm) * vs[n]
        down, _ = loss_fn(params)
        for n in names:
            params[n][...] = saved[n]
        numeric = (up - down) / (2.0 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return worst


def _check_mlp(seed, h, dims, bias):
    rng = _rng(seed, f"mlp{dims}")
    spec = MlpSpec("m", dims, bias=bias)
    store = init_mlp(spec, seed, {})
    x = rng.normal(size=(7, dims[0]))
    w = rng.normal(size=(7, dims[-1]))

    def loss_fn(p):
        y, cache = mlp_forward(x, p, spec)
        grads = zero_like_store(p)
        mlp_backward(w, cache, p, spec, grads)
        return float((y * w).sum()), grads

    return finite_diff_check(loss_fn, store, h)


def _check_fusion(seed, h, strategy, d):
    """Loss = <f_fused, w>; checks both parameter and input gradients."""
    rng = _rng(seed, f"fusion-{strategy}-{d}")
    n = 9
    specs = make_fusion_specs(d) if strategy == "gated" else {"proj_concat": concat_proj_spec(d)}
    params = {}
    for spec in specs.values():
        init_mlp(spec, seed + 1, params)
    params["f_lidar"] = rng.normal(size=(n, d))
    params["f_surfel"] = rng.normal(size=(n, d))
    params["f_gaussian"] = rng.normal(size=(n, d))
    w = rng.normal(size=(n, d))

    def loss_fn(p):
        fused, cache = fuse_features(strategy, p["f_lidar"], p["f_surfel"], p["f_gaussian"], p, specs)
        grads = zero_like_store(p)
        dl, ds, dg = fuse_features_backward(strategy, w, cache, p, specs, grads)
        grads["f_lidar"], grads["f_surfel"], grads["f_gaussian"] = dl, ds, dg
        return float((fused * w).sum()), grads

    return finite_diff_check(loss_fn, params, h)


def _check_aggregate(seed, h, raw_dim, d):
    """Projection + segment-mean chain, voxelization held fixed."""
    rng = _rng(seed, f"agg-{raw_dim}-{d}")
    n = 40
    xyz = rng.uniform(-3.0, 3.0, size=(n, 3))
    config = BevGridConfig(0.5, 8.0)
    vox = dynamic_voxelize(xyz, config)
    feats = rng.normal(size=(n, raw_dim))[vox.point_indices]
    spec = MlpSpec("proj", (raw_dim, d, d), acts=(True, False))
    params = init_mlp(spec, seed, {})
    w = rng.normal(size=(vox.num_voxels, d))

    def loss_fn(p):
        grid, cache = aggregate_from_vox(feats, vox, config, p, spec)
        grads = zero_like_store(p)
        aggregate_backward(w, cache, p, spec, grads)
        return float((grid.features * w).sum()), grads

    return finite_diff_check(loss_fn, params, h)


def _check_focal(seed, h, alpha, beta):
    rng = _rng(seed, f"focal-{alpha}-{beta}")
    shape = (3, 23)
    target = rng.uniform(0.0, 0.7, size=shape)
    target[np.arange(shape[0]), rng.integers(0, shape[1], size=shape[0])] = 1.0
    params = {"logits": np.clip(rng.normal(scale=1.2, size=shape), -2.4, 2.4)}

    def loss_fn(p):
        loss, grad = focal_heatmap_loss(p["logits"], target, alpha, beta)
        return loss, {"logits": grad}

    return finite_diff_check(loss_fn, params, h)


def _check_seg(seed, h, gamma):
    rng = _rng(seed, f"seg-{gamma}")
    shape = (3, 20)
    target = (rng.random(shape) < 0.3).astype(np.float64)
    params = {"logits": np.clip(rng.normal(scale=1.2, size=shape), -2.4, 2.4)}

    def loss_fn(p):
        loss, grad = seg_focal_loss(p["logits"], target, gamma)
        return loss, {"logits": grad}

    return finite_diff_check(loss_fn, params, h)


def _check_heading(seed, h, n_bins):
    rng = _rng(seed, f"heading-{n_bins}")
    p_boxes = 11
    params = {
        "logits": rng.normal(size=(p_boxes, n_bins)),
        "res": rng.uniform(-0.25, 0.25, size=p_boxes),
    }
    theta = rng.uniform(-np.pi, np.pi, size=p_boxes)

    def loss_fn(p):
        loss, dlogits, dres = heading_bin_loss(p["logits"], p["res"], theta, n_bins)
        return loss, {"logits": dlogits, "res": dres}

    return finite_diff_check(loss_fn, params, h)


def _check_smooth_l1(seed, h, beta):
    rng = _rng(seed, f"sl1-{beta}")
    x = rng.normal(scale=1.5, size=37)
    x = x[np.abs(np.abs(x) - beta) > 0.05]  # the kink is a true subgradient

    def loss_fn(p):
        val, grad = smooth_l1(p["x"], beta)
        return float(val.sum()), {"x": grad}

    return finite_diff_check(loss_fn, {"x": x}, h)


def _check_iou(seed, h, n):
    """Overlapping pairs only; disjoint pairs sit on a zero-gradient plateau."""
    rng = _rng(seed, f"iou-{n}")
    gt = np.stack(
        [
            rng.uniform(-1.0, 1.0, n),
            rng.uniform(-1.0, 1.0, n),
            rng.uniform(2.0, 3.0, n),
            rng.uniform(2.0, 3.0, n),
        ],
        axis=1,
    )
    params = {
        "xy": gt[:, :2] + rng.uniform(-0.4, 0.4, size=(n, 2)),
        "lw": rng.uniform(2.0, 3.0, size=(n, 2)),
    }

    def loss_fn(p):
        loss, dxy, dlw = iou_loss(p["xy"], p["lw"], gt)
        return loss, {"xy": dxy, "lw": dlw}

    return finite_diff_check(loss_fn, params, h)


def _check_total(seed, h, n_classes, n_bins):
    """d total / d head_out on a 10x10 pillar patch with 1-2 boxes."""
    rng = _rng(seed, f"total-{n_classes}-{n_bins}")
    layout = HeadLayout(n_classes, n_bins)
    config = BevGridConfig(0.2, 75.0)
    span = np.arange(-5, 5)
    keys = np.stack(np.meshgrid(span, span, indexing="ij"), axis=-1).reshape(-1, 2).astype(np.int64)
    keys = keys[np.argsort(encode_keys_2d(keys), kind="stable")]
    gts = [GroundTruth(Box3D(np.array([0.3, -0.2, 0.4]), np.array([1.1, 0.7, 0.8]), 0.5), 0)]
    if n_classes > 1:
        gts.append(GroundTruth(Box3D(np.array([-0.5, 0.4, 0.3]), np.array([0.9, 0.6, 0.7]), -1.1), 1))
    targets = make_targets(gts, keys, config, layout)
    params = {"head": np.clip(rng.normal(scale=0.8, size=(keys.shape[0], layout.out_dim)), -2.4, 2.4)}
    cfg = LossConfig()

    def loss_fn(p):
        breakdown, dhead = total_loss(p["head"], targets, keys, config, layout, cfg)
        return breakdown.total, {"head": dhead}

    return finite_diff_check(loss_fn, params, h)


def _check_model(seed, h, strategy):
    """Full sample-level loss against every parameter of a tiny detector."""
    from .synth import SceneSpec, generate_scene
    from .train import make_sample

    model_cfg = ModelConfig(d=4, n_classes=1, n_bins=4, head_hidden=6, strategy=strategy, voxel_size=0.25)
    scene_spec = SceneSpec(
        seed=seed * 13 + 5,
        extent=6.0,
        n_clutter=1,
        n_parked=1,
        n_moving=1,
        n_frames=2,
        traversals=2,
        points_per_scan=200,
    )
    sample = make_sample(generate_scene(scene_spec), model_cfg)
    inputs = sample.inputs()
    det = Detector(model_cfg, seed=seed)
    loss_cfg = LossConfig()

    def loss_fn(p):
        breakdown, grads, _ = Detector(model_cfg, params=p).loss(inputs, sample.gts, loss_cfg, min_gt_points=1)
        return breakdown.total, grads

    return directional_diff_check(loss_fn, det.params, _rng(seed, f"dirs-{strategy}"), h)


def gradient_check_suite(seed: int = 0, h: float = 1e-5):
    """Every configuration in the catalog; returns [(name, max rel err)].

    Covers the fusion strategies with parameters, the per-modality
    aggregation chain, each loss term, the assembled per-sample loss, and
    the full detector end to end.
    """
    rows = [
        ("mlp-2layer", _check_mlp(seed, h, (5, 8, 3), True)),
        ("mlp-bias-free", _check_mlp(seed + 1, h, (6, 4, 4), False)),
    ]
    for i, d in enumerate((3, 4, 6)):
        rows.append((f"fusion-gated-d{d}", _check_fusion(seed + i, h, "gated", d)))
    for i, d in enumerate((4, 6)):
        rows.append((f"fusion-concat-d{d}", _check_fusion(seed + i, h, "concat", d)))
    rows.append(("aggregate-5to4", _check_aggregate(seed, h, 5, 4)))
    rows.append(("aggregate-7to6", _check_aggregate(seed + 1, h, 7, 6)))
    for i, (alpha, beta) in enumerate(((2.0, 4.0), (2.0, 2.0), (1.5, 4.0))):
        rows.append((f"focal-a{alpha}-b{beta}", _check_focal(seed + i, h, alpha, beta)))
    for i, gamma in enumerate((2.0, 1.0, 3.0)):
        rows.append((f"seg-focal-g{gamma}", _check_seg(seed + i, h, gamma)))
    for i, n_bins in enumerate((12, 7)):
        rows.append((f"heading-{n_bins}bins", _check_heading(seed + i, h, n_bins)))
    for i, beta in enumerate((1.0, 0.4)):
        rows.append((f"smooth-l1-b{beta}", _check_smooth_l1(seed + i, h, beta)))
    for i, n in enumerate((6, 11)):
        rows.append((f"iou-{n}pairs", _check_iou(seed + i, h, n)))
    rows.append(("total-1class", _check_total(seed, h, 1, 12)))
    rows.append(("total-2class", _check_total(seed + 1, h, 2, 6)))
    rows.append(("model-gated", _check_model(seed, h, "gated")))
    rows.append(("model-concat", _check_model(seed + 1, h, "concat")))
    return rows
