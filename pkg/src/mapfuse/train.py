"""Training orchestration: augmentation, mixed-modality regimen, inference.

One sample is one scan plus optional map priors and a camera stub. The loop
is single-threaded batch-1 SGD with cosine decay, deterministic for a fixed
seed. Mix-training independently drops each prior per step so a single
model serves every modality combination at inference time.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .detection import GroundTruth, LossConfig, evaluate_ap, filter_boxes_by_points
from .errors import ConfigError, DataError, NumericError
from .gaussians import (
    GaussianMap,
    flip_gaussian_rotations,
    init_gaussians_from_lidar,
    quat_multiply,
    rotate_sh1,
)
from .geom import Box3D, PointCloud, RigidTransform, matrix_to_quat, transform_points
from .model import Detector, ModelConfig, ModelInputs
from .nn import Sgd
from .surfels import SurfelMap, build_surfels_tiled, remove_dynamic_points
from .synth import Scene, SceneSpec, generate_scene, scan_traversals, simulate_lidar_scan, synth_camera_bev
from .voxels import BevFeatureGrid, decode_keys_2d, encode_keys_2d

_MASK64 = (1 << 64) - 1

LOG_FIELDS = ("step", "total", "hm", "bbox", "seg")


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, zlib.crc32(tag.encode())]))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    p_rotation: float = 0.74
    p_flip: float = 0.5
    scale_range: tuple = (0.95, 1.05)
    p_point_dropout: float = 0.05
    p_drop_surfel: float = 0.3
    p_drop_gaussian: float = 0.3
    augment: bool = True
    mix_modality: bool = True
    min_gt_points: int = 5
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("need at least one training step")
        for p in (self.p_rotation, self.p_flip, self.p_point_dropout, self.p_drop_surfel, self.p_drop_gaussian):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("probabilities must lie in [0, 1]")
        if self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale range must be ordered")


@dataclass(frozen=True)
class Sample:
    """One scan in the vehicle frame with whatever priors exist for it."""

    lidar: PointCloud
    gts: tuple
    camera: BevFeatureGrid = None
    surfel: SurfelMap = None
    gaussian: GaussianMap = None
    scene_id: int = 0

    def inputs(self, with_surfel: bool = True, with_gaussian: bool = True, with_camera: bool = True) -> ModelInputs:
        return ModelInputs(
            self.lidar,
            self.surfel if with_surfel else None,
            self.gaussian if with_gaussian else None,
            self.camera if with_camera else None,
        )


# --- augmentation -------------------------------------------------------------


def _transform_bev_grid(grid: BevFeatureGrid, xy_fn) -> BevFeatureGrid:
    """Remap a grid by transforming pillar centers and re-voxelizing.

    Colliding pillars are mean-pooled; this is the nearest-pillar
    approximation of a continuous warp.
    """
    if grid is None or len(grid) == 0:
        return grid
    vs = grid.config.voxel_size
    centers = (grid.keys.astype(np.float64) + 0.5) * vs
    moved = xy_fn(centers)
    new_keys = np.floor(moved / vs).astype(np.int64)
    codes = encode_keys_2d(new_keys)
    uniq, seg = np.unique(codes, return_inverse=True)
    mean = kernels.segment_mean(seg, grid.features, uniq.shape[0])
    return BevFeatureGrid(decode_keys_2d(uniq), mean, grid.config)


def _rotate_sample(s: Sample, phi: float) -> Sample:
    t = RigidTransform.from_yaw(phi)
    r = t.rotation
    gts = tuple(
        GroundTruth(Box3D(r @ g.box.center, g.box.dims, g.box.yaw + phi), g.class_id) for g in s.gts
    )
    surfel = s.surfel
    if surfel is not None and len(surfel) > 0:
        surfel = SurfelMap(
            surfel.voxel_size, surfel.positions @ r.T, surfel.normals @ r.T, surfel.colors, surfel.support
        )
    gaussian = s.gaussian
    if gaussian is not None and len(gaussian) > 0:
        qr = matrix_to_quat(r)
        rot = np.stack([quat_multiply(qr, q) for q in gaussian.rot])
        gaussian = GaussianMap(
            gaussian.mu @ r.T, rot, gaussian.scale, gaussian.opacity, gaussian.sh0, rotate_sh1(gaussian.sh1, r)
        )
    camera = _transform_bev_grid(s.camera, lambda xy: xy @ r[:2, :2].T)
    return replace(s, lidar=transform_points(s.lidar, t), gts=gts, surfel=surfel, gaussian=gaussian, camera=camera)


def _flip_sample(s: Sample) -> Sample:
    xyz = s.lidar.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    lidar = PointCloud(xyz, s.lidar.rgb, s.lidar.intensity, s.lidar.traversal)
    gts = tuple(
        GroundTruth(
            Box3D(g.box.center * np.array([1.0, -1.0, 1.0]), g.box.dims, -g.box.yaw), g.class_id
        )
        for g in s.gts
    )
    surfel = s.surfel
    if surfel is not None and len(surfel) > 0:
        flip = np.array([1.0, -1.0, 1.0])
        surfel = SurfelMap(
            surfel.voxel_size, surfel.positions * flip, surfel.normals * flip, surfel.colors, surfel.support
        )
    gaussian = s.gaussian
    if gaussian is not None and len(gaussian) > 0:
        sh1 = gaussian.sh1.copy()
        sh1[:, :, 0] = -sh1[:, :, 0]  # the order-1 y coefficient flips sign
        gaussian = GaussianMap(
            gaussian.mu * np.array([1.0, -1.0, 1.0]),
            flip_gaussian_rotations(gaussian.rot),
            gaussian.scale,
            gaussian.opacity,
            gaussian.sh0,
            sh1,
        )
    camera = _transform_bev_grid(s.camera, lambda xy: xy * np.array([1.0, -1.0]))
    return replace(s, lidar=lidar, gts=gts, surfel=surfel, gaussian=gaussian, camera=camera)


def _scale_sample(s: Sample, u: float) -> Sample:
    lidar = PointCloud(s.lidar.xyz * u, s.lidar.rgb, s.lidar.intensity, s.lidar.traversal)
    gts = tuple(GroundTruth(Box3D(g.box.center * u, g.box.dims * u, g.box.yaw), g.class_id) for g in s.gts)
    surfel = s.surfel
    if surfel is not None and len(surfel) > 0:
        surfel = SurfelMap(surfel.voxel_size, surfel.positions * u, surfel.normals, surfel.colors, surfel.support)
    gaussian = s.gaussian
    if gaussian is not None and len(gaussian) > 0:
        gaussian = GaussianMap(
            gaussian.mu * u, gaussian.rot, gaussian.scale * u, gaussian.opacity, gaussian.sh0, gaussian.sh1
        )
    camera = _transform_bev_grid(s.camera, lambda xy: xy * u)
    return replace(s, lidar=lidar, gts=gts, surfel=surfel, gaussian=gaussian, camera=camera)


def augment_sample(s: Sample, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    """Rotation, y-flip, scaling, then per-point dropout; priors follow along."""
    if rng.random() < cfg.p_rotation:
        s = _rotate_sample(s, float(rng.uniform(-math.pi, math.pi)))
    if rng.random() < cfg.p_flip:
        s = _flip_sample(s)
    lo, hi = cfg.scale_range
    if lo != hi:
        s = _scale_sample(s, float(rng.uniform(lo, hi)))
    if cfg.p_point_dropout > 0.0 and len(s.lidar) > 0:
        keep = rng.random(len(s.lidar)) >= cfg.p_point_dropout
        s = replace(s, lidar=s.lidar.select(keep))
    return s


# --- training loop ------------------------------------------------------------


def train_toy(samples, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(), detector: Detector = None):
    """SGD over the sample list; returns (detector, loss log rows).

    Log rows are (step, total, hm, bbox, seg) tuples, one per step.
    """
    if not samples:
        raise DataError("training requires at least one sample")
    if detector is None:
        detector = Detector(model_cfg, seed=cfg.seed)
    rng = _rng(cfg.seed, "train")
    opt = Sgd(detector.params, cfg.lr, cfg.momentum, total_steps=cfg.steps)
    log = []
    for step in range(cfg.steps):
        idx = int(rng.integers(len(samples)))
        sample = samples[idx]
        if cfg.augment:
            sample = augment_sample(sample, rng, cfg)
        drop_s = drop_g = False
        if cfg.mix_modality:
            if sample.surfel is not None:
                drop_s = bool(rng.random() < cfg.p_drop_surfel)
            if sample.gaussian is not None:
                drop_g = bool(rng.random() < cfg.p_drop_gaussian)
        breakdown, grads, _ = detector.loss(
            sample.inputs(), sample.gts, cfg.loss, drop_s, drop_g, cfg.min_gt_points
        )
        if not math.isfinite(breakdown.total):
            raise NumericError(
                f"non-finite loss {breakdown.total} at step {step} on sample {sample.scene_id}"
            )
        opt.step(grads, step)
        log.append((step, breakdown.total, breakdown.hm, breakdown.bbox, breakdown.seg))
    return detector, log


def run_inference(
    sample: Sample,
    detector: Detector,
    with_surfel: bool = True,
    with_gaussian: bool = True,
    with_camera: bool = True,
    score_threshold: float = None,
):
    """Detections for one sample under the given modality availability."""
    if sample.lidar is None or len(sample.lidar) == 0:
        raise DataError("inference requires a lidar scan")
    return detector.predict(
        sample.inputs(with_surfel, with_gaussian, with_camera), score_threshold=score_threshold
    )


def evaluate_model(
    detector: Detector,
    samples,
    iou_threshold: float = 0.5,
    with_surfel: bool = True,
    with_gaussian: bool = True,
    min_gt_points: int = 5,
    score_threshold: float = None,
):
    """AP/APH over a sample list, with the low-support gt filter applied."""
    det_frames, gt_frames = [], []
    for s in samples:
        det_frames.append(run_inference(s, detector, with_surfel, with_gaussian, score_threshold=score_threshold))
        gt_frames.append(filter_boxes_by_points(s.lidar.xyz, s.gts, min_gt_points))
    return evaluate_ap(det_frames, gt_frames, iou_threshold)


# --- two-pass inference -------------------------------------------------------


@dataclass(frozen=True)
class TwoPassResult:
    pass1: tuple  # per-frame Detection lists, map-free
    pass2: tuple  # per-frame Detection lists, with on-the-fly priors
    surfel: SurfelMap
    gaussian: GaussianMap


def two_pass_inference(
    sequence,
    detector: Detector,
    margin: float = 0.1,
    map_voxel: float = 0.5,
    score_threshold: float = None,
) -> TwoPassResult:
    """Map-free pass, on-the-fly map build from its boxes, then a prior pass.

    The sequence frames must share one static scene; pass-1 detections from
    every frame mask the accumulated cloud before map construction. The map
    voxel defaults coarser than a dedicated mapping run because a single
    sequence accumulates far fewer points than repeated traversals.
    """
    pass1 = [
        run_inference(s, detector, with_surfel=False, with_gaussian=False, score_threshold=score_threshold)
        for s in sequence
    ]
    boxes = [d.box for dets in pass1 for d in dets]
    cloud = PointCloud.concatenate([s.lidar for s in sequence])
    clean = remove_dynamic_points(cloud, boxes, margin)
    surfel, _ = build_surfels_tiled(clean, voxel_size=map_voxel)
    gaussian = init_gaussians_from_lidar(clean, voxel_size=map_voxel)
    pass2 = [
        run_inference(
            replace(s, surfel=surfel, gaussian=gaussian), detector, score_threshold=score_threshold
        )
        for s in sequence
    ]
    return TwoPassResult(tuple(pass1), tuple(pass2), surfel, gaussian)


# --- benchmark dataset --------------------------------------------------------


def benchmark_scene_spec(seed: int, index: int) -> SceneSpec:
    return SceneSpec(seed=seed * 1009 + index, extent=8.0, n_clutter=4, n_parked=2, n_moving=1)


def build_scene_maps(scene: Scene, map_voxel: float = 0.25, margin: float = 0.1):
    """Static maps from the traversal scans, gt dynamic objects removed."""
    cloud = scan_traversals(scene)
    clean = remove_dynamic_points(cloud, scene.all_dynamic_boxes(), margin)
    surfel, _ = build_surfels_tiled(clean, voxel_size=map_voxel)
    gaussian = init_gaussians_from_lidar(clean, voxel_size=map_voxel)
    return surfel, gaussian


def make_sample(
    scene: Scene,
    model_cfg: ModelConfig,
    frame: int = 0,
    with_priors: bool = True,
    with_camera: bool = True,
) -> Sample:
    lidar = simulate_lidar_scan(scene, scene.ego_xy(0), frame=frame, traversal=0)
    surfel = gaussian = None
    if with_priors:
        surfel, gaussian = build_scene_maps(scene)
    camera = synth_camera_bev(scene, model_cfg.grid, model_cfg.d) if with_camera else None
    return Sample(
        lidar=lidar,
        gts=tuple(scene.gt_boxes(frame)),
        camera=camera,
        surfel=surfel,
        gaussian=gaussian,
        scene_id=scene.spec.seed,
    )


def make_dataset(
    seed: int,
    n_scenes: int,
    model_cfg: ModelConfig,
    with_priors: bool = True,
    frame: int = 0,
    with_camera: bool = True,
):
    """n_scenes independent scenes rendered into samples."""
    return [
        make_sample(generate_scene(benchmark_scene_spec(seed, i)), model_cfg, frame, with_priors, with_camera)
        for i in range(n_scenes)
    ]


def make_sequence(seed: int, model_cfg: ModelConfig, with_camera: bool = True):
    """All frames of one scene as a map-free sequence for two-pass runs."""
    scene = generate_scene(benchmark_scene_spec(seed, 0))
    return [
        make_sample(scene, model_cfg, frame=f, with_priors=False, with_camera=with_camera)
        for f in range(scene.spec.n_frames)
    ]
