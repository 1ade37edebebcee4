"""Geometric primitives: colored points, rigid transforms, oriented boxes, rotations.

All types are immutable values and every operation is a pure function, so they
are safe to use from any number of concurrent workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    DegenerateRotationError,
    InvalidTransformError,
    ShapeError,
)

ORTHONORMAL_TOL = 1e-9
_DEGENERATE_EPS = 1e-12


def normalize_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    t = np.asarray(theta, dtype=np.float64)
    wrapped = t - 2.0 * np.pi * np.round(t / (2.0 * np.pi))
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Point:
    """One colored LiDAR return in the vehicle frame."""

    position: np.ndarray  # (3,) meters
    color: np.ndarray  # (3,) rgb in [0, 1]
    intensity: float = 0.0  # [0, 1]
    traversal_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.position.shape != (3,) or self.color.shape != (3,):
            raise ShapeError("point needs a 3-vector position and rgb color")
        if not np.all(np.isfinite(self.position)):
            raise DataError("point position must be finite")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise DataError("point color must lie in [0, 1]")
        if not 0.0 <= self.intensity <= 1.0:
            raise DataError("point intensity must lie in [0, 1]")


@dataclass(frozen=True)
class PointCloud:
    """Columnar point set; ordering is stable and the cloud may be empty."""

    xyz: np.ndarray  # (N, 3) float64, meters
    rgb: np.ndarray  # (N, 3) float64 in [0, 1]
    intensity: np.ndarray  # (N,) float64 in [0, 1]
    traversal: np.ndarray  # (N,) int32

    def __post_init__(self):
        object.__setattr__(self, "xyz", np.ascontiguousarray(self.xyz, dtype=np.float64))
        object.__setattr__(self, "rgb", np.ascontiguousarray(self.rgb, dtype=np.float64))
        object.__setattr__(self, "intensity", np.ascontiguousarray(self.intensity, dtype=np.float64))
        object.__setattr__(self, "traversal", np.ascontiguousarray(self.traversal, dtype=np.int32))
        n = self.xyz.shape[0]
        if self.xyz.shape != (n, 3) or self.rgb.shape != (n, 3):
            raise ShapeError("xyz and rgb must both be (N, 3)")
        if self.intensity.shape != (n,) or self.traversal.shape != (n,):
            raise ShapeError("intensity and traversal must be (N,)")
        if n and not np.all(np.isfinite(self.xyz)):
            raise DataError("point positions must be finite")
        if n and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0):
            raise DataError("colors must lie in [0, 1]")
        if n and (self.intensity.min() < 0.0 or self.intensity.max() > 1.0):
            raise DataError("intensities must lie in [0, 1]")

    def __len__(self):
        return self.xyz.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int32))

    @staticmethod
    def from_points(points) -> "PointCloud":
        if not points:
            return PointCloud.empty()
        return PointCloud(
            np.stack([p.position for p in points]),
            np.stack([p.color for p in points]),
            np.array([p.intensity for p in points]),
            np.array([p.traversal_id for p in points], dtype=np.int32),
        )

    def point(self, i: int) -> Point:
        return Point(self.xyz[i].copy(), self.rgb[i].copy(), float(self.intensity[i]), int(self.traversal[i]))

    def select(self, index) -> "PointCloud":
        """New cloud with the rows picked by a mask or index array, order preserved."""
        return PointCloud(self.xyz[index], self.rgb[index], self.intensity[index], self.traversal[index])

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.rgb for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.traversal for c in clouds]),
        )


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise ShapeError("rotation must be (3, 3) and translation (3,)")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise InvalidTransformError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidTransformError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(theta: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(theta), math.sin(theta)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(r, np.asarray(translation, dtype=np.float64))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `inner` first, then `self`."""
        return RigidTransform(self.rotation @ inner.rotation, self.rotation @ inner.translation + self.translation)


def transform_points(pc: PointCloud, t: RigidTransform) -> PointCloud:
    """Rigidly move every point; colors, intensities and ids are untouched."""
    return PointCloud(t.apply(pc.xyz), pc.rgb, pc.intensity, pc.traversal)


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center, (l, w, h) extents, and yaw about +z (zero along +x).

    Yaw is counterclockwise and normalized to (-pi, pi] on construction.
    """

    center: np.ndarray  # (3,)
    dims: np.ndarray  # (3,) l, w, h > 0
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=np.float64))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))
        if self.center.shape != (3,) or self.dims.shape != (3,):
            raise ShapeError("box center and dims must be 3-vectors")
        if not np.all(np.isfinite(self.center)):
            raise DataError("box center must be finite")
        if np.any(self.dims <= 0.0):
            raise DataError("box dims must be strictly positive")

    def bev_corners(self) -> np.ndarray:
        """(4, 2) footprint corners, counterclockwise."""
        l2, w2 = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[l2, w2], [-l2, w2], [-l2, -w2], [l2, -w2]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def as_array(self) -> np.ndarray:
        """[cx, cy, cz, l, w, h, yaw] row used by the batch kernels."""
        return np.concatenate([self.center, self.dims, [self.yaw]])


def boxes_as_array(boxes) -> np.ndarray:
    """(M, 7) array of box rows, empty-safe."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def point_in_box(p, box: Box3D, margin: float = 0.0) -> bool:
    """Containment after rotating into the box frame, dilated by `margin` meters."""
    if margin < 0.0:
        raise DataError("margin must be non-negative")
    p = np.asarray(p, dtype=np.float64)
    d = p - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    bx = c * d[0] + s * d[1]
    by = -s * d[0] + c * d[1]
    half = box.dims / 2.0 + margin
    return bool(abs(bx) <= half[0] and abs(by) <= half[1] and abs(d[2]) <= half[2])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ShapeError("quaternion must be a 4-vector (w, x, y, z)")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        raise DegenerateRotationError(f"quaternion norm {n:.3e} is not 1")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a proper rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot6d(q) -> np.ndarray:
    """First two columns of the quaternion's rotation matrix, column-major."""
    m = quat_to_matrix(q)
    return np.concatenate([m[:, 0], m[:, 1]])


def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt decoding of a 6D rotation back to a proper rotation matrix."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise ShapeError("6D rotation must be a 6-vector")
    if not np.all(np.isfinite(r6)):
        raise DataError("6D rotation must be finite")
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= _DEGENERATE_EPS:
        raise DegenerateRotationError("first column has zero norm")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 <= _DEGENERATE_EPS * max(1.0, np.linalg.norm(a2)):
        raise DegenerateRotationError("columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)
