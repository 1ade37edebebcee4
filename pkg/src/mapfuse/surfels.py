"""Surfel map construction from multi-traversal point clouds.

A surfel summarizes the points of one 0.25 m voxel as an oriented disk:
mean position, PCA normal, mean color, and the supporting point count.
The tiled builder partitions the plane into voxel-aligned tiles and is
bit-identical to the untiled build because every voxel lies wholly inside
one tile and per-voxel accumulation runs in a canonical point order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    InsufficientSupportError,
    ShapeError,
)
from .geom import PointCloud, boxes_as_array
from .voxels import FeaturePoints, group_by_voxel_3d

DEFAULT_VOXEL_SIZE = 0.25
DEFAULT_MIN_SUPPORT = 3
DEFAULT_REMOVAL_MARGIN = 0.1

# Two smallest covariance eigenvalues closer than this leave the normal
# direction ambiguous (collinear or isotropic voxel).
_EIGENGAP_TOL = 1e-12


@dataclass(frozen=True)
class Surfel:
    """One oriented disk."""

    position: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit
    color: np.ndarray  # (3,) in [0, 1]
    support: int


@dataclass(frozen=True)
class SurfelMap:
    """Columnar surfel set, rows sorted by 3D voxel key at build time.

    Normals are unit to 1e-9 when freshly estimated; maps loaded from 32-bit
    files are validated at 1e-5 instead (quantization error).
    """

    voxel_size: float
    positions: np.ndarray  # (K, 3)
    normals: np.ndarray  # (K, 3)
    colors: np.ndarray  # (K, 3)
    support: np.ndarray  # (K,) int64

    def __post_init__(self):
        object.__setattr__(self, "positions", np.ascontiguousarray(self.positions, dtype=np.float64))
        object.__setattr__(self, "normals", np.ascontiguousarray(self.normals, dtype=np.float64))
        object.__setattr__(self, "colors", np.ascontiguousarray(self.colors, dtype=np.float64))
        object.__setattr__(self, "support", np.ascontiguousarray(self.support, dtype=np.int64))
        k = self.positions.shape[0]
        if self.voxel_size <= 0.0:
            raise ConfigError("voxel_size must be positive")
        if (
            self.positions.shape != (k, 3)
            or self.normals.shape != (k, 3)
            or self.colors.shape != (k, 3)
            or self.support.shape != (k,)
        ):
            raise ShapeError("surfel columns must agree on (K, 3)/(K,) shapes")
        if k == 0:
            return
        if not np.all(np.isfinite(self.positions)):
            raise DataError("surfel positions must be finite")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise DataError("surfel normals must be unit length")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise DataError("surfel colors must lie in [0, 1]")
        if self.support.min() < 1:
            raise DataError("surfel support must be >= 1")

    def __len__(self):
        return self.positions.shape[0]

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i].copy(), self.normals[i].copy(), self.colors[i].copy(), int(self.support[i]))

    def voxel_keys(self) -> np.ndarray:
        return np.floor(self.positions / self.voxel_size).astype(np.int64)

    @staticmethod
    def empty(voxel_size: float = DEFAULT_VOXEL_SIZE) -> "SurfelMap":
        z = np.zeros((0, 3))
        return SurfelMap(voxel_size, z, z.copy(), z.copy(), np.zeros(0, dtype=np.int64))


@dataclass
class BuildReport:
    """Per-build bookkeeping; degenerate voxels are skipped, not fatal."""

    voxels_seen: int = 0
    voxels_built: int = 0
    skipped_low_support: int = 0
    skipped_degenerate: int = 0

    def merge(self, other: "BuildReport") -> "BuildReport":
        return BuildReport(
            self.voxels_seen + other.voxels_seen,
            self.voxels_built + other.voxels_built,
            self.skipped_low_support + other.skipped_low_support,
            self.skipped_degenerate + other.skipped_degenerate,
        )


def remove_dynamic_points(pc: PointCloud, boxes, margin: float = DEFAULT_REMOVAL_MARGIN) -> PointCloud:
    """Drop every point inside any (margin-dilated) box; order preserved."""
    if margin < 0.0:
        raise DataError("margin must be non-negative")
    if len(boxes) == 0 or len(pc) == 0:
        return pc
    mask = kernels.points_in_any_box(pc.xyz, boxes_as_array(boxes), margin)
    return pc.select(~mask)


def estimate_normal(points, reference_origin, min_support: int = DEFAULT_MIN_SUPPORT) -> np.ndarray:
    """PCA normal of a point set, oriented toward the reference origin.

    The normal is the eigenvector of the smallest covariance eigenvalue; an
    eigengap under 1e-12 between the two smallest eigenvalues means the
    direction is ambiguous and the voxel is rejected.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    if pts.shape[0] < min_support:
        raise InsufficientSupportError(f"normal estimation needs >= {min_support} points, got {pts.shape[0]}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    # einsum keeps the reduction order fixed, so tiled builds stay bit-identical.
    cov = np.einsum("ni,nj->ij", centered, centered) / pts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] - eigvals[0] <= _EIGENGAP_TOL:
        raise DegenerateGeometryError("smallest covariance eigenvalues coincide; normal is ambiguous")
    n = eigvecs[:, 0]
    ref = np.asarray(reference_origin, dtype=np.float64)
    if float(n @ (ref - mean)) < 0.0:
        n = -n
    return n / np.linalg.norm(n)


def _build_columnar(xyz, rgb, voxel_size, min_support, sensor_origin):
    """Core per-voxel loop shared by the plain and tiled builders."""
    grouping = group_by_voxel_3d(xyz, voxel_size)
    report = BuildReport(voxels_seen=grouping.keys.shape[0])
    keys, positions, normals, colors, support = [], [], [], [], []
    for v in range(grouping.keys.shape[0]):
        rows = grouping.order[grouping.starts[v] : grouping.starts[v + 1]]
        if rows.size < min_support:
            report.skipped_low_support += 1
            continue
        pts = xyz[rows]
        try:
            n = estimate_normal(pts, sensor_origin, min_support)
        except DegenerateGeometryError:
            report.skipped_degenerate += 1
            continue
        keys.append(grouping.keys[v])
        positions.append(pts.mean(axis=0))
        normals.append(n)
        colors.append(rgb[rows].mean(axis=0))
        support.append(rows.size)
    report.voxels_built = len(keys)
    if not keys:
        empty = np.zeros((0, 3))
        return np.zeros((0, 3), np.int64), empty, empty.copy(), empty.copy(), np.zeros(0, np.int64), report
    return (
        np.asarray(keys, dtype=np.int64),
        np.asarray(positions),
        np.asarray(normals),
        np.asarray(colors),
        np.asarray(support, dtype=np.int64),
        report,
    )


def build_surfels_with_report(
    pc: PointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    min_support: int = DEFAULT_MIN_SUPPORT,
    sensor_origin=(0.0, 0.0, 0.0),
):
    _, positions, normals, colors, support, report = _build_columnar(
        pc.xyz, pc.rgb, voxel_size, min_support, sensor_origin
    )
    return SurfelMap(voxel_size, positions, normals, colors, support), report


def build_surfels(
    pc: PointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    min_support: int = DEFAULT_MIN_SUPPORT,
    sensor_origin=(0.0, 0.0, 0.0),
) -> SurfelMap:
    """One surfel per voxel holding >= min_support points; sorted by voxel key."""
    return build_surfels_with_report(pc, voxel_size, min_support, sensor_origin)[0]


def build_surfels_tiled(
    pc: PointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    tile_size: float = 8.0,
    min_support: int = DEFAULT_MIN_SUPPORT,
    sensor_origin=(0.0, 0.0, 0.0),
    jobs: int = 1,
):
    """Tile-parallel surfel build, bit-identical to the untiled result.

    tile_size must be an integer multiple of voxel_size: tiles then align to
    voxel boundaries and no voxel straddles two tiles, so no halo exchange is
    needed. Returns (map, report).
    """
    if tile_size <= 0.0:
        raise ConfigError("tile_size must be positive")
    ratio = tile_size / voxel_size
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("tile_size must be an integer multiple of voxel_size")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    if len(pc) == 0:
        return SurfelMap.empty(voxel_size), BuildReport()

    tile_keys = np.floor(pc.xyz[:, :2] / tile_size).astype(np.int64)
    codes = (tile_keys[:, 0] + (1 << 30)) * (1 << 31) + (tile_keys[:, 1] + (1 << 30))
    uniq, seg = np.unique(codes, return_inverse=True)
    tile_rows = [np.flatnonzero(seg == t) for t in range(uniq.size)]

    def run(rows):
        return _build_columnar(pc.xyz[rows], pc.rgb[rows], voxel_size, min_support, sensor_origin)

    if jobs == 1 or uniq.size == 1:
        parts = [run(rows) for rows in tile_rows]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, tile_rows))

    report = BuildReport()
    for p in parts:
        report = report.merge(p[5])
    parts = [p for p in parts if p[0].shape[0]]
    if not parts:
        return SurfelMap.empty(voxel_size), report

    keys = np.concatenate([p[0] for p in parts])
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    merged = SurfelMap(
        voxel_size,
        np.concatenate([p[1] for p in parts])[order],
        np.concatenate([p[2] for p in parts])[order],
        np.concatenate([p[3] for p in parts])[order],
        np.concatenate([p[4] for p in parts])[order],
    )
    return merged, report


def surfel_to_feature_points(m: SurfelMap) -> FeaturePoints:
    """One pseudo-point per surfel: [position(3), normal(3), color(3), log support]."""
    if len(m) == 0:
        return FeaturePoints.empty(10)
    feats = np.concatenate(
        [m.positions, m.normals, m.colors, np.log(m.support.astype(np.float64))[:, None]], axis=1
    )
    return FeaturePoints(m.positions, feats)
