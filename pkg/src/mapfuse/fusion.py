"""Gated multi-modal BEV fusion with residual defaults.

The fusion chain (per pillar, all element-wise over d-dim rows):

    alpha_surfel = Swish(sigma_in(f_lidar)) * sigma_surfel(f_surfel)
    f_inter      = phi_surfel(alpha_surfel) + f_lidar
    alpha_gauss  = Swish(sigma_inter(f_inter)) * sigma_gaussian(f_gaussian)
    f_fused      = phi_gaussian(alpha_gauss) + f_inter

sigma_surfel, sigma_gaussian, phi_surfel and phi_gaussian are bias-free
stacks of zero-preserving layers, which turns "missing priors default to
the lidar feature" into an exact structural identity instead of a learned
tendency: zero prior rows force both alphas to zero and both residuals to
identity.

Comparator strategies (sum / average / concat) exist for ablation runs
only; they do not share the zero-default guarantee.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import AlignmentError, ConfigError, ShapeError
from .nn import MlpSpec, init_mlp, mlp_backward, mlp_forward, swish, swish_grad
from .voxels import (
    BevFeatureGrid,
    BevGridConfig,
    FeaturePoints,
    dynamic_voxelize,
    union_keys,
    scatter_rows,
)

FUSION_STRATEGIES = ("gated", "concat", "sum", "average", "none")


def make_fusion_specs(d: int) -> dict:
    """The six gate/projection stacks; prior paths are bias-free by design."""
    return {
        "sigma_in": MlpSpec("sigma_in", (d, d, d), bias=True),
        "sigma_surfel": MlpSpec("sigma_surfel", (d, d, d), bias=False),
        "sigma_inter": MlpSpec("sigma_inter", (d, d, d), bias=True),
        "sigma_gaussian": MlpSpec("sigma_gaussian", (d, d, d), bias=False),
        "phi_surfel": MlpSpec("phi_surfel", (d, d, d), bias=False),
        "phi_gaussian": MlpSpec("phi_gaussian", (d, d, d), bias=False),
    }


def init_fusion_params(d: int, seed: int, store: dict = None) -> dict:
    store = {} if store is None else store
    for spec in make_fusion_specs(d).values():
        init_mlp(spec, seed, store)
    return store


@dataclass(frozen=True)
class ModalityBundle:
    """Per-sample modality grids; absent priors are None.

    `aligned()` re-indexes every present grid onto the union key set, which
    is the form gated_fuse expects.
    """

    lidar: BevFeatureGrid
    surfel: BevFeatureGrid = None
    gaussian: BevFeatureGrid = None
    camera: BevFeatureGrid = None
    dropped_surfel: bool = False
    dropped_gaussian: bool = False

    def grids(self):
        return {"lidar": self.lidar, "surfel": self.surfel, "gaussian": self.gaussian, "camera": self.camera}

    def aligned(self):
        """(union keys, dict of zero-filled (U, d) feature matrices)."""
        present = {k: g for k, g in self.grids().items() if g is not None}
        d = self.lidar.dim
        for name, g in present.items():
            if g.dim != d:
                raise ShapeError(f"{name} grid dimension {g.dim} != {d}")
            if g.config != self.lidar.config:
                raise ConfigError(f"{name} grid uses a different BEV configuration")
        union = union_keys([g.keys for g in present.values()])
        rows = {}
        for name in ("lidar", "surfel", "gaussian", "camera"):
            g = present.get(name)
            rows[name] = scatter_rows(g.keys, g.features, union) if g is not None else np.zeros((union.shape[0], d))
        return union, rows


def apply_modality_dropout(bundle: ModalityBundle, p_surfel: float, p_gaussian: float, rng) -> ModalityBundle:
    """Independently drop each prior; a dropped prior becomes an empty grid.

    An empty grid is the sparse form of the all-zero feature field, so
    "dropped" and "present but zeroed" are indistinguishable downstream.
    Lidar and camera are never dropped. Decisions are recorded on the bundle.
    """
    if not (0.0 <= p_surfel <= 1.0 and 0.0 <= p_gaussian <= 1.0):
        raise ConfigError("dropout probabilities must lie in [0, 1]")
    drop_s = bundle.surfel is not None and rng.random() < p_surfel
    drop_g = bundle.gaussian is not None and rng.random() < p_gaussian
    empty = lambda g: BevFeatureGrid.empty(g.dim, g.config)
    return replace(
        bundle,
        surfel=empty(bundle.surfel) if drop_s else bundle.surfel,
        gaussian=empty(bundle.gaussian) if drop_g else bundle.gaussian,
        dropped_surfel=drop_s,
        dropped_gaussian=drop_g,
    )


# --- per-modality aggregation ----------------------------------------------


@dataclass
class AggregateCache:
    vox: object
    mlp_cache: list
    counts: np.ndarray
    num_points: int


def aggregate_from_vox(feats: np.ndarray, vox, config: BevGridConfig, store: dict, spec: MlpSpec):
    """Project per-point features to d, then segment-mean into pillars."""
    from . import kernels

    if feats.shape[0] != vox.segment_ids.shape[0]:
        raise ShapeError("one raw feature row per voxelized point required")
    if feats.shape[0] == 0:
        grid = BevFeatureGrid.empty(spec.d_out, config)
        return grid, AggregateCache(vox, [], np.zeros(0, dtype=np.int64), 0)
    projected, mlp_cache = mlp_forward(feats, store, spec)
    counts = vox.counts()
    mean = kernels.segment_mean(vox.segment_ids, projected, vox.num_voxels)
    grid = BevFeatureGrid(vox.unique_keys, mean, config)
    return grid, AggregateCache(vox, mlp_cache, counts, feats.shape[0])


def aggregate_modality(points: FeaturePoints, config: BevGridConfig, store: dict, spec: MlpSpec):
    """Voxelize pseudo-points and mean their projected features per pillar."""
    vox = dynamic_voxelize(points.xyz, config)
    feats = points.features[vox.point_indices]
    return aggregate_from_vox(feats, vox, config, store, spec)


def aggregate_backward(dgrid: np.ndarray, cache: AggregateCache, store: dict, spec: MlpSpec, grads: dict):
    """Push grid-row gradients back through the mean and the projection."""
    if cache.num_points == 0:
        return None
    seg = cache.vox.segment_ids
    dprojected = dgrid[seg] / cache.counts[seg][:, None]
    return mlp_backward(dprojected, cache.mlp_cache, store, spec, grads)


# --- gated fusion -----------------------------------------------------------


@dataclass
class GatedFuseCache:
    c_sigma_in: list
    c_sigma_surfel: list
    c_sigma_inter: list
    c_sigma_gaussian: list
    c_phi_surfel: list
    c_phi_gaussian: list
    g1: np.ndarray
    a1: np.ndarray
    s1: np.ndarray
    g2: np.ndarray
    a2: np.ndarray
    s2: np.ndarray


def _check_aligned(f_lidar, f_surfel, f_gaussian):
    if f_lidar.shape != f_surfel.shape or f_lidar.shape != f_gaussian.shape:
        raise AlignmentError("fusion inputs must be aligned to the same (K, d) shape")


def gated_fuse(f_lidar, f_surfel, f_gaussian, store: dict, specs: dict):
    """Two gated stages with residual connections; returns (f_fused, cache)."""
    _check_aligned(f_lidar, f_surfel, f_gaussian)
    g1, c1 = mlp_forward(f_lidar, store, specs["sigma_in"])
    a1 = swish(g1)
    s1, c2 = mlp_forward(f_surfel, store, specs["sigma_surfel"])
    alpha_surfel = a1 * s1
    ps, c3 = mlp_forward(alpha_surfel, store, specs["phi_surfel"])
    f_inter = ps + f_lidar

    g2, c4 = mlp_forward(f_inter, store, specs["sigma_inter"])
    a2 = swish(g2)
    s2, c5 = mlp_forward(f_gaussian, store, specs["sigma_gaussian"])
    alpha_gaussian = a2 * s2
    pg, c6 = mlp_forward(alpha_gaussian, store, specs["phi_gaussian"])
    f_fused = pg + f_inter
    return f_fused, GatedFuseCache(c1, c2, c4, c5, c3, c6, g1, a1, s1, g2, a2, s2)


def gated_fuse_backward(dfused, cache: GatedFuseCache, store: dict, specs: dict, grads: dict):
    """Returns gradients w.r.t. (f_lidar, f_surfel, f_gaussian)."""
    d_alpha_g = mlp_backward(dfused, cache.c_phi_gaussian, store, specs["phi_gaussian"], grads)
    d_finter = dfused.copy()
    d_gauss = mlp_backward(d_alpha_g * cache.a2, cache.c_sigma_gaussian, store, specs["sigma_gaussian"], grads)
    d_g2 = d_alpha_g * cache.s2 * swish_grad(cache.g2)
    d_finter += mlp_backward(d_g2, cache.c_sigma_inter, store, specs["sigma_inter"], grads)

    d_alpha_s = mlp_backward(d_finter, cache.c_phi_surfel, store, specs["phi_surfel"], grads)
    d_lidar = d_finter.copy()
    d_surfel = mlp_backward(d_alpha_s * cache.a1, cache.c_sigma_surfel, store, specs["sigma_surfel"], grads)
    d_g1 = d_alpha_s * cache.s1 * swish_grad(cache.g1)
    d_lidar += mlp_backward(d_g1, cache.c_sigma_in, store, specs["sigma_in"], grads)
    return d_lidar, d_surfel, d_gauss


# --- comparator strategies (ablation only) ----------------------------------


def concat_proj_spec(d: int) -> MlpSpec:
    return MlpSpec("proj_concat", (3 * d, d), bias=True, acts=(False,))


def fuse_features(strategy: str, f_lidar, f_surfel, f_gaussian, store: dict, specs: dict):
    """Dispatch over fusion strategies; returns (f_fused, cache)."""
    _check_aligned(f_lidar, f_surfel, f_gaussian)
    if strategy == "gated":
        return gated_fuse(f_lidar, f_surfel, f_gaussian, store, specs)
    if strategy == "concat":
        stacked = np.concatenate([f_lidar, f_surfel, f_gaussian], axis=1)
        return mlp_forward(stacked, store, specs["proj_concat"])
    if strategy == "sum":
        return f_lidar + f_surfel + f_gaussian, None
    if strategy == "average":
        return (f_lidar + f_surfel + f_gaussian) / 3.0, None
    if strategy == "none":
        return f_lidar, None
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def fuse_features_backward(strategy: str, dfused, cache, store: dict, specs: dict, grads: dict):
    if strategy == "gated":
        return gated_fuse_backward(dfused, cache, store, specs, grads)
    if strategy == "concat":
        dstacked = mlp_backward(dfused, cache, store, specs["proj_concat"], grads)
        d = dstacked.shape[1] // 3
        return dstacked[:, :d], dstacked[:, d : 2 * d], dstacked[:, 2 * d :]
    if strategy == "sum":
        return dfused, dfused.copy(), dfused.copy()
    if strategy == "average":
        third = dfused / 3.0
        return third, third.copy(), third.copy()
    if strategy == "none":
        zero = np.zeros_like(dfused)
        return dfused, zero, zero.copy()
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


# --- camera concatenation ----------------------------------------------------


def concat_camera(f_fused: BevFeatureGrid, f_camera: BevFeatureGrid = None) -> BevFeatureGrid:
    """[camera | fused] over the union key set, zero-filled where absent."""
    if f_camera is None:
        feats = np.concatenate([np.zeros_like(f_fused.features), f_fused.features], axis=1)
        return BevFeatureGrid(f_fused.keys, feats, f_fused.config)
    if f_camera.dim != f_fused.dim:
        raise ShapeError("camera and fused grids must share the feature dimension")
    union = union_keys([f_fused.keys, f_camera.keys])
    cam = scatter_rows(f_camera.keys, f_camera.features, union)
    fused = scatter_rows(f_fused.keys, f_fused.features, union)
    return BevFeatureGrid(union, np.concatenate([cam, fused], axis=1), f_fused.config)
