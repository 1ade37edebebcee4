"""Mapping-prior BEV fusion: surfel/gaussian maps gated into a toy detector.

Static maps built from multi-traversal lidar act as extra modalities for a
pillar-based BEV detector. The fusion layer degrades to the lidar-only path
exactly when priors are absent, so one model serves every modality combo.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DecodeError,
    MapfuseError,
    NumericError,
    ShapeError,
)
from .geom import Box3D, Point, PointCloud, RigidTransform
from .surfels import SurfelMap, build_surfels, build_surfels_tiled, remove_dynamic_points
from .gaussians import GaussianMap, init_gaussians_from_lidar
from .voxels import BevFeatureGrid, BevGridConfig, dynamic_voxelize, segment_reduce
from .detection import Detection, GroundTruth, LossConfig, evaluate_ap
from .model import Detector, ModelConfig, ModelInputs
from .train import Sample, TrainConfig, augment_sample, run_inference, train_toy, two_pass_inference

__all__ = [
    "__version__",
    "MapfuseError", "ConfigError", "DataError", "DecodeError", "ShapeError", "NumericError",
    "Point", "PointCloud", "Box3D", "RigidTransform",
    "SurfelMap", "build_surfels", "build_surfels_tiled", "remove_dynamic_points",
    "GaussianMap", "init_gaussians_from_lidar",
    "BevGridConfig", "BevFeatureGrid", "dynamic_voxelize", "segment_reduce",
    "Detection", "GroundTruth", "LossConfig", "evaluate_ap",
    "Detector", "ModelConfig", "ModelInputs",
    "Sample", "TrainConfig", "train_toy", "augment_sample", "run_inference", "two_pass_inference",
]
