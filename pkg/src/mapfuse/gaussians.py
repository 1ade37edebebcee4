"""3D Gaussian scene prior: LiDAR initialization and feature encoding.

Gaussians are initialized per voxel from the point covariance and carry
opacity plus degree-0/1 spherical harmonics per color channel. Photometric
refinement against images is out of scope; initialization-only Gaussians
already exercise the whole fusion path.

SH conventions: sh0 is the DC term with c = C0*sh0 + 0.5; the degree-1
triple per channel is stored in (y, z, x) basis order and transforms as a
vector under rotation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .geom import matrix_to_quat, quat_to_matrix, quat_to_rot6d
from .voxels import FeaturePoints, group_by_voxel_3d

SH_C0 = 0.28209479177
DEFAULT_ALPHA_INIT = 0.5
DEFAULT_SCALE_FLOOR = 0.02
FEATURE_DIM = 25  # mu(3) rot6d(6) log-scale(3) logit-opacity(1) sh0(3) sh1(9)

# Opacity 1.0 is valid but has no finite logit; the encoder clamps only the
# logit input, never the stored value.
_LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian with SH color."""

    mu: np.ndarray  # (3,)
    rot: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    scale: np.ndarray  # (3,) meters, > 0
    opacity: float  # (0, 1]
    sh0: np.ndarray  # (3,) DC per channel
    sh1: np.ndarray  # (3, 3) per channel, (y, z, x) order


@dataclass(frozen=True)
class GaussianMap:
    """Columnar Gaussian set, rows sorted by initialization voxel key."""

    mu: np.ndarray  # (K, 3)
    rot: np.ndarray  # (K, 4) (w, x, y, z)
    scale: np.ndarray  # (K, 3)
    opacity: np.ndarray  # (K,)
    sh0: np.ndarray  # (K, 3)
    sh1: np.ndarray  # (K, 3, 3)

    def __post_init__(self):
        for name in ("mu", "rot", "scale", "opacity", "sh0", "sh1"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        k = self.mu.shape[0]
        if (
            self.mu.shape != (k, 3)
            or self.rot.shape != (k, 4)
            or self.scale.shape != (k, 3)
            or self.opacity.shape != (k,)
            or self.sh0.shape != (k, 3)
            or self.sh1.shape != (k, 3, 3)
        ):
            raise ShapeError("gaussian columns disagree on row count or widths")
        if k == 0:
            return
        if np.abs(np.linalg.norm(self.rot, axis=1) - 1.0).max() > 1e-6:
            raise DataError("gaussian rotations must be unit quaternions")
        if self.scale.min() <= 0.0:
            raise DataError("gaussian scales must be strictly positive")
        if self.opacity.min() <= 0.0 or self.opacity.max() > 1.0:
            raise DataError("gaussian opacity must lie in (0, 1]")

    def __len__(self):
        return self.mu.shape[0]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.mu[i].copy(),
            self.rot[i].copy(),
            self.scale[i].copy(),
            float(self.opacity[i]),
            self.sh0[i].copy(),
            self.sh1[i].copy(),
        )

    @staticmethod
    def empty() -> "GaussianMap":
        return GaussianMap(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3))
        )


def init_gaussians_from_lidar(
    pc,
    voxel_size: float = 0.25,
    min_support: int = 3,
    alpha_init: float = DEFAULT_ALPHA_INIT,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> GaussianMap:
    """One Gaussian per voxel holding >= min_support points.

    mu is the mean position; rotation and scale come from the covariance
    eigendecomposition with scales floored (degenerate voxels need no special
    case); sh0 encodes the mean color, sh1 starts at zero.
    """
    if not 0.0 < alpha_init <= 1.0:
        raise ConfigError("alpha_init must lie in (0, 1]")
    if scale_floor <= 0.0:
        raise ConfigError("scale_floor must be positive")
    xyz, rgb = pc.xyz, pc.rgb
    grouping = group_by_voxel_3d(xyz, voxel_size)
    mus, quats, scales, sh0s = [], [], [], []
    for v in range(grouping.keys.shape[0]):
        rows = grouping.order[grouping.starts[v] : grouping.starts[v + 1]]
        if rows.size < min_support:
            continue
        pts = xyz[rows]
        mean = pts.mean(axis=0)
        centered = pts - mean
        cov = np.einsum("ni,nj->ij", centered, centered) / pts.shape[0]
        eigvals, eigvecs = np.linalg.eigh(cov)
        if np.linalg.det(eigvecs) < 0.0:
            eigvecs = eigvecs.copy()
            eigvecs[:, 0] = -eigvecs[:, 0]
        mus.append(mean)
        quats.append(matrix_to_quat(eigvecs))
        scales.append(np.maximum(np.sqrt(np.maximum(eigvals, 0.0)), scale_floor))
        sh0s.append((rgb[rows].mean(axis=0) - 0.5) / SH_C0)
    k = len(mus)
    if k == 0:
        return GaussianMap.empty()
    return GaussianMap(
        np.asarray(mus),
        np.asarray(quats),
        np.asarray(scales),
        np.full(k, alpha_init),
        np.asarray(sh0s),
        np.zeros((k, 3, 3)),
    )


def gaussian_to_feature_points(m: GaussianMap) -> FeaturePoints:
    """One pseudo-point per Gaussian with the 25-dim attribute encoding.

    Higher SH orders never reach this path (the file format stores only
    degree <= 1). Opacity enters as a logit so the MLP sees an unbounded
    input; the clamp below only guards logit(1).
    """
    if len(m) == 0:
        return FeaturePoints.empty(FEATURE_DIM)
    k = len(m)
    rot6d = np.empty((k, 6))
    for i in range(k):
        rot6d[i] = quat_to_rot6d(m.rot[i])
    a = np.clip(m.opacity, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    logit = np.log(a) - np.log1p(-a)
    feats = np.concatenate(
        [m.mu, rot6d, np.log(m.scale), logit[:, None], m.sh0, m.sh1.reshape(k, 9)], axis=1
    )
    return FeaturePoints(m.mu, feats)


def rotate_sh1(sh1: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Rotate each channel's degree-1 triple; input/output in (y, z, x) order."""
    sh1 = np.asarray(sh1, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if sh1.shape[-2:] != (3, 3):
        raise ShapeError("sh1 must be (..., 3, 3)")
    v_xyz = sh1[..., [2, 0, 1]]
    rotated = v_xyz @ rotation.T
    return rotated[..., [1, 2, 0]]


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product (w, x, y, z); rotation q1 applied after q2."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def flip_gaussian_rotations(rot: np.ndarray) -> np.ndarray:
    """Quaternions after mirroring the scene across the x-z plane.

    The mirrored basis F R diag(1, 1, -1) keeps determinant +1, so it stays
    a proper rotation and the scale axes keep their meaning.
    """
    flip = np.diag([1.0, -1.0, 1.0])
    post = np.diag([1.0, 1.0, -1.0])
    out = np.empty_like(rot)
    for i in range(rot.shape[0]):
        out[i] = matrix_to_quat(flip @ quat_to_matrix(rot[i]) @ post)
    return out
