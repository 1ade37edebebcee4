"""End-to-end detector: per-modality aggregation, BEV fusion, MLP head.

The flow per sample: voxelize lidar pseudo-points and each prior's feature
points, project every modality to a shared width d, fuse lidar with the
priors on the union key set, concatenate camera features, drop rows whose
feature vector is exactly zero, and run the detection head on what remains.

Pruning exact-zero rows makes "modality absent" and "modality present but
zeroed" produce identical head inputs, which the mixed-modality regimen
relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import (
    Detection,
    HeadLayout,
    LossBreakdown,
    LossConfig,
    decode_boxes,
    filter_boxes_by_points,
    make_targets,
    nms_bev,
    total_loss,
)
from .errors import ConfigError, DataError, ShapeError
from .fusion import (
    FUSION_STRATEGIES,
    aggregate_modality,
    aggregate_backward,
    concat_proj_spec,
    fuse_features,
    fuse_features_backward,
    make_fusion_specs,
    ModalityBundle,
)
from .gaussians import FEATURE_DIM as GAUSSIAN_FEATURE_DIM
from .gaussians import GaussianMap, gaussian_to_feature_points
from .geom import PointCloud
from .nn import MlpSpec, init_mlp, mlp_backward, mlp_forward, zero_like_store
from .surfels import SurfelMap, surfel_to_feature_points
from .voxels import (
    BevFeatureGrid,
    BevGridConfig,
    FeaturePoints,
    encode_keys_2d,
)

LIDAR_RAW_DIM = 7  # pillar-relative x, y | z | r, g, b | intensity
SURFEL_RAW_DIM = 10
HEAD_BIAS_INIT = -4.0  # heatmap/seg logit bias: start everything as background


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_classes: int = 1
    n_bins: int = 12
    head_hidden: int = 32
    strategy: str = "gated"
    voxel_size: float = 0.2
    bev_range: float = 75.0
    score_threshold: float = 0.3
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.d < 1 or self.head_hidden < 1:
            raise ConfigError("feature and hidden widths must be at least 1")
        if self.n_classes < 1 or self.n_bins < 2:
            raise ConfigError("need at least one class and two heading bins")
        if self.strategy not in FUSION_STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        if not (0.0 <= self.score_threshold < 1.0):
            raise ConfigError("score threshold must lie in [0, 1)")

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout(self.n_classes, self.n_bins)

    @property
    def grid(self) -> BevGridConfig:
        return BevGridConfig(self.voxel_size, self.bev_range)


@dataclass(frozen=True)
class ModelInputs:
    """One sample in the vehicle frame. Lidar is mandatory."""

    lidar: PointCloud
    surfel: SurfelMap = None
    gaussian: GaussianMap = None
    camera: BevFeatureGrid = None


def make_lidar_features(pc: PointCloud, voxel_size: float) -> FeaturePoints:
    """Raw per-point features with xy taken relative to the pillar center."""
    cell = np.floor(pc.xyz[:, :2] / voxel_size)
    center = (cell + 0.5) * voxel_size
    feats = np.concatenate(
        [pc.xyz[:, :2] - center, pc.xyz[:, 2:3], pc.rgb, pc.intensity[:, None]], axis=1
    )
    return FeaturePoints(pc.xyz, feats)


@dataclass
class ForwardState:
    """Everything forward() computed that backward()/decode need."""

    union_keys: np.ndarray
    kept: np.ndarray  # indices into union rows that survived pruning
    kept_keys: np.ndarray
    head_in: np.ndarray
    head_out: np.ndarray
    head_cache: list
    fuse_cache: object
    agg_caches: dict  # modality name -> AggregateCache or None
    camera_cache: list  # mlp cache for the camera projection, or None
    positions: dict  # modality name -> row positions within the union
    aligned_dim: int


class Detector:
    """Holds parameters and runs forward/backward/predict for one config."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict = None):
        self.config = config
        self.specs = self._build_specs(config)
        if params is None:
            params = {}
            for spec in self.specs.values():
                init_mlp(spec, seed, params)
            head = self.specs["head"]
            bias = params[head.bias_name(head.n_layers - 1)]
            bias[config.layout.hm] = HEAD_BIAS_INIT
            bias[config.layout.seg] = HEAD_BIAS_INIT
        self.params = params
        self._validate_params()

    @staticmethod
    def _build_specs(config: ModelConfig) -> dict:
        d = config.d
        # Point-modality projections are two-layer PointMLPs applied before the
        # segment mean, so each pillar aggregates nonlinear per-point features
        # (a plain linear map would commute with the mean and collapse every
        # pillar to its raw-feature average). The camera grid arrives already
        # embedded per pillar, so a single linear map suffices there.
        specs = {
            "proj_lidar": MlpSpec("proj_lidar", (LIDAR_RAW_DIM, d, d), acts=(True, False)),
            "proj_surfel": MlpSpec("proj_surfel", (SURFEL_RAW_DIM, d, d), acts=(True, False)),
            "proj_gaussian": MlpSpec("proj_gaussian", (GAUSSIAN_FEATURE_DIM, d, d), acts=(True, False)),
            "proj_camera": MlpSpec("proj_camera", (d, d), acts=(False,)),
        }
        if config.strategy == "gated":
            specs.update(make_fusion_specs(d))
        elif config.strategy == "concat":
            specs["proj_concat"] = concat_proj_spec(d)
        specs["head"] = MlpSpec(
            "head",
            (2 * d, config.head_hidden, config.head_hidden, config.layout.out_dim),
        )
        return specs

    def _validate_params(self):
        for spec in self.specs.values():
            for name in spec.tensor_names():
                if name not in self.params:
                    raise ConfigError(f"missing parameter tensor {name}")

    def tensor_names(self):
        names = []
        for spec in self.specs.values():
            names.extend(spec.tensor_names())
        return names

    def num_params(self) -> int:
        return sum(self.params[n].size for n in self.tensor_names())

    def zero_grads(self) -> dict:
        return zero_like_store({n: self.params[n] for n in self.tensor_names()})

    # -- forward -------------------------------------------------------------

    def forward(self, inputs: ModelInputs, drop_surfel: bool = False, drop_gaussian: bool = False) -> ForwardState:
        if inputs.lidar is None:
            raise DataError("lidar input is mandatory")
        cfg = self.config
        grid_cfg = cfg.grid

        lidar_fp = make_lidar_features(inputs.lidar, cfg.voxel_size)
        lidar_grid, lidar_cache = aggregate_modality(lidar_fp, grid_cfg, self.params, self.specs["proj_lidar"])

        agg_caches = {"lidar": lidar_cache, "surfel": None, "gaussian": None}
        surfel_grid = gaussian_grid = None
        if inputs.surfel is not None and not drop_surfel and len(inputs.surfel) > 0:
            surfel_grid, agg_caches["surfel"] = aggregate_modality(
                surfel_to_feature_points(inputs.surfel), grid_cfg, self.params, self.specs["proj_surfel"]
            )
        if inputs.gaussian is not None and not drop_gaussian and len(inputs.gaussian) > 0:
            gaussian_grid, agg_caches["gaussian"] = aggregate_modality(
                gaussian_to_feature_points(inputs.gaussian), grid_cfg, self.params, self.specs["proj_gaussian"]
            )

        camera_grid = None
        camera_cache = None
        if inputs.camera is not None and len(inputs.camera.keys) > 0:
            if inputs.camera.dim != cfg.d:
                raise ShapeError(f"camera grid must be {cfg.d}-dimensional")
            if inputs.camera.config != grid_cfg:
                raise ConfigError("camera grid uses a different BEV configuration")
            projected, camera_cache = mlp_forward(inputs.camera.features, self.params, self.specs["proj_camera"])
            camera_grid = BevFeatureGrid(inputs.camera.keys, projected, grid_cfg)

        bundle = ModalityBundle(lidar_grid, surfel_grid, gaussian_grid, camera_grid)
        union, rows = bundle.aligned()
        union_codes = encode_keys_2d(union)
        positions = {}
        for name, g in bundle.grids().items():
            if g is not None and g.keys.shape[0] > 0:
                positions[name] = np.searchsorted(union_codes, encode_keys_2d(g.keys))

        fused, fuse_cache = fuse_features(
            cfg.strategy, rows["lidar"], rows["surfel"], rows["gaussian"], self.params, self.specs
        )
        f_final = np.concatenate([rows["camera"], fused], axis=1)
        kept = np.flatnonzero(np.any(f_final != 0.0, axis=1))
        head_in = f_final[kept]
        head_out, head_cache = mlp_forward(head_in, self.params, self.specs["head"]) if kept.size else (
            np.zeros((0, cfg.layout.out_dim)),
            [],
        )
        return ForwardState(
            union_keys=union,
            kept=kept,
            kept_keys=union[kept],
            head_in=head_in,
            head_out=head_out,
            head_cache=head_cache,
            fuse_cache=fuse_cache,
            agg_caches=agg_caches,
            camera_cache=camera_cache,
            positions=positions,
            aligned_dim=cfg.d,
        )

    # -- backward ------------------------------------------------------------

    def backward(self, state: ForwardState, dhead: np.ndarray, grads: dict):
        """Accumulate parameter gradients for d loss / d head_out."""
        cfg = self.config
        d = state.aligned_dim
        if state.kept.size == 0:
            return
        dfinal_kept = mlp_backward(dhead, state.head_cache, self.params, self.specs["head"], grads)
        dfinal = np.zeros((state.union_keys.shape[0], 2 * d))
        dfinal[state.kept] = dfinal_kept
        dcam = dfinal[:, :d]
        dfused = dfinal[:, d:]

        dl, ds, dg = fuse_features_backward(
            cfg.strategy, dfused, state.fuse_cache, self.params, self.specs, grads
        )
        for name, dal in (("lidar", dl), ("surfel", ds), ("gaussian", dg)):
            cache = state.agg_caches.get(name)
            if cache is None or cache.num_points == 0 or name not in state.positions:
                continue
            spec = self.specs[f"proj_{name}"]
            aggregate_backward(dal[state.positions[name]], cache, self.params, spec, grads)
        if state.camera_cache is not None and "camera" in state.positions:
            mlp_backward(
                dcam[state.positions["camera"]], state.camera_cache, self.params, self.specs["proj_camera"], grads
            )

    # -- losses and prediction -------------------------------------------------

    def loss(
        self,
        inputs: ModelInputs,
        gts,
        loss_cfg: LossConfig = LossConfig(),
        drop_surfel: bool = False,
        drop_gaussian: bool = False,
        min_gt_points: int = 5,
    ):
        """(breakdown, grads, state) for one sample."""
        state = self.forward(inputs, drop_surfel, drop_gaussian)
        kept_gts = filter_boxes_by_points(inputs.lidar.xyz, gts, min_gt_points)
        targets = make_targets(kept_gts, state.kept_keys, self.config.grid, self.config.layout)
        breakdown, dhead = total_loss(
            state.head_out, targets, state.kept_keys, self.config.grid, self.config.layout, loss_cfg
        )
        grads = self.zero_grads()
        self.backward(state, dhead, grads)
        return breakdown, grads, state

    def predict(
        self,
        inputs: ModelInputs,
        drop_surfel: bool = False,
        drop_gaussian: bool = False,
        score_threshold: float = None,
        nms_iou: float = None,
    ):
        state = self.forward(inputs, drop_surfel, drop_gaussian)
        thr = self.config.score_threshold if score_threshold is None else score_threshold
        dets = decode_boxes(state.head_out, state.kept_keys, self.config.grid, self.config.layout, thr)
        iou = self.config.nms_iou if nms_iou is None else nms_iou
        return nms_bev(dets, iou)


def detection_to_dict(det: Detection) -> dict:
    return {
        "center": [float(v) for v in det.box.center],
        "dims": [float(v) for v in det.box.dims],
        "yaw": float(det.box.yaw),
        "class": int(det.class_id),
        "score": float(det.score),
    }


def detection_from_dict(rec: dict) -> Detection:
    from .geom import Box3D

    return Detection(
        Box3D(np.asarray(rec["center"], dtype=np.float64), np.asarray(rec["dims"], dtype=np.float64), float(rec["yaw"])),
        float(rec["score"]),
        int(rec["class"]),
    )
