"""BEV pillar voxelization, sparse feature grids, and segment reductions.

Two distinct grids live in this package: the 2D pillar grid defined here
(detection path, 0.2 m) and the 3D voxel grid used by the map builders
(0.25 m, see `group_by_voxel_3d`). They are configured independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ShapeError

# Key components are packed into one int64 so np.unique gives lexicographic
# order directly. 21 bits per axis: +-1,048,575 cells, or +-262 km at 0.25 m.
_KEY_BITS = 21
_KEY_OFF = 1 << (_KEY_BITS - 1)
_KEY_MAX = (1 << _KEY_BITS) - 1


@dataclass(frozen=True)
class BevGridConfig:
    """Pillar grid geometry for the detection path."""

    voxel_size: float = 0.2
    bev_range: float = 75.0
    max_voxels: int = 250_000

    def __post_init__(self):
        if self.voxel_size <= 0.0:
            raise ConfigError("voxel_size must be positive")
        if self.bev_range <= 0.0 or self.max_voxels < 1:
            raise ConfigError("bev_range must be positive and max_voxels >= 1")


def encode_keys_2d(keys: np.ndarray) -> np.ndarray:
    """Pack (K, 2) integer keys into monotonic int64 codes."""
    keys = np.asarray(keys, dtype=np.int64)
    if keys.size and np.abs(keys).max() >= _KEY_OFF:
        raise DataError("pillar index exceeds the packed key range")
    return ((keys[:, 0] + _KEY_OFF) << _KEY_BITS) | (keys[:, 1] + _KEY_OFF)


def decode_keys_2d(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    ix = (codes >> _KEY_BITS) - _KEY_OFF
    iy = (codes & _KEY_MAX) - _KEY_OFF
    return np.stack([ix, iy], axis=1)


def keys_to_centers(keys: np.ndarray, voxel_size: float) -> np.ndarray:
    """(K, 2) xy coordinates of pillar centers."""
    return (np.asarray(keys, dtype=np.float64) + 0.5) * voxel_size


@dataclass(frozen=True)
class FeaturePoints:
    """Pseudo-points carrying a raw feature vector each (surfels, Gaussians...)."""

    xyz: np.ndarray  # (N, 3) float64
    features: np.ndarray  # (N, D) float64

    def __post_init__(self):
        object.__setattr__(self, "xyz", np.ascontiguousarray(self.xyz, dtype=np.float64))
        object.__setattr__(self, "features", np.ascontiguousarray(self.features, dtype=np.float64))
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ShapeError("feature point positions must be (N, 3)")
        if self.features.ndim != 2 or self.features.shape[0] != self.xyz.shape[0]:
            raise ShapeError("one feature row per point required")

    def __len__(self):
        return self.xyz.shape[0]

    @staticmethod
    def empty(dim: int) -> "FeaturePoints":
        return FeaturePoints(np.zeros((0, 3)), np.zeros((0, dim)))


@dataclass(frozen=True)
class VoxelizationResult:
    """Pillar assignment for the points that fell inside the grid range."""

    keys: np.ndarray  # (N, 2) int64, per kept point
    unique_keys: np.ndarray  # (K, 2) int64, lexicographically sorted
    segment_ids: np.ndarray  # (N,) int64 index into unique_keys
    point_indices: np.ndarray  # (N,) int64 index into the input cloud

    @property
    def num_voxels(self) -> int:
        return self.unique_keys.shape[0]

    def counts(self) -> np.ndarray:
        return kernels.segment_count(self.segment_ids, self.num_voxels)


def dynamic_voxelize(points, config: BevGridConfig) -> VoxelizationResult:
    """Group points into BEV pillars; no per-pillar point cap.

    Points outside +-bev_range in x or y are dropped. If the distinct key
    count exceeds max_voxels, the keys with the most points survive (ties
    prefer the lexicographically smaller key) and other points are dropped.
    """
    xyz = np.asarray(getattr(points, "xyz", points), dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    r = config.bev_range
    keep = (np.abs(xyz[:, 0]) <= r) & (np.abs(xyz[:, 1]) <= r)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        e = np.zeros((0, 2), dtype=np.int64)
        z = np.zeros(0, dtype=np.int64)
        return VoxelizationResult(e, e.copy(), z, z.copy())
    keys = np.floor(xyz[idx, :2] / config.voxel_size).astype(np.int64)
    codes = encode_keys_2d(keys)
    uniq, seg = np.unique(codes, return_inverse=True)
    seg = seg.astype(np.int64)

    if uniq.size > config.max_voxels:
        counts = np.bincount(seg)
        dec = decode_keys_2d(uniq)
        order = np.lexsort((dec[:, 1], dec[:, 0], -counts))
        survivors = np.zeros(uniq.size, dtype=bool)
        survivors[order[: config.max_voxels]] = True
        point_keep = survivors[seg]
        remap = np.cumsum(survivors, dtype=np.int64) - 1
        seg = remap[seg[point_keep]]
        keys = keys[point_keep]
        idx = idx[point_keep]
        uniq = uniq[survivors]

    return VoxelizationResult(keys, decode_keys_2d(uniq), seg, idx)


def segment_reduce(features, segment_ids, num_segments: int, mode: str = "mean") -> np.ndarray:
    """Per-segment mean/sum/max; empty segments yield zero rows."""
    if mode == "mean":
        return kernels.segment_mean(segment_ids, features, num_segments)
    if mode == "sum":
        return kernels.segment_sum(segment_ids, features, num_segments)
    if mode == "max":
        return kernels.segment_max(segment_ids, features, num_segments, empty_fill=0.0)
    raise ConfigError(f"unknown reduction mode {mode!r}")


@dataclass(frozen=True)
class BevFeatureGrid:
    """Sparse pillar-indexed feature matrix, keys sorted and unique."""

    keys: np.ndarray  # (K, 2) int64
    features: np.ndarray  # (K, d) float64
    config: BevGridConfig = field(default_factory=BevGridConfig)

    def __post_init__(self):
        object.__setattr__(self, "keys", np.ascontiguousarray(self.keys, dtype=np.int64))
        object.__setattr__(self, "features", np.ascontiguousarray(self.features, dtype=np.float64))
        if self.keys.ndim != 2 or self.keys.shape[1] != 2:
            raise ShapeError("grid keys must be (K, 2)")
        if self.features.ndim != 2 or self.features.shape[0] != self.keys.shape[0]:
            raise ShapeError("one feature row per key required")
        codes = encode_keys_2d(self.keys)
        if codes.size > 1 and not np.all(np.diff(codes) > 0):
            raise DataError("grid keys must be strictly lexicographically sorted")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.keys.shape[0]

    @staticmethod
    def empty(dim: int, config: BevGridConfig) -> "BevFeatureGrid":
        return BevFeatureGrid(np.zeros((0, 2), dtype=np.int64), np.zeros((0, dim)), config)


def union_keys(key_sets) -> np.ndarray:
    """Sorted union of several (K, 2) key arrays."""
    codes = [encode_keys_2d(k) for k in key_sets if k.shape[0]]
    if not codes:
        return np.zeros((0, 2), dtype=np.int64)
    merged = codes[0]
    for c in codes[1:]:
        merged = np.union1d(merged, c)
    return decode_keys_2d(merged)


def scatter_rows(src_keys: np.ndarray, src_rows: np.ndarray, dst_keys: np.ndarray) -> np.ndarray:
    """Place rows of a sub-grid into the larger sorted key set, zero-filled."""
    out = np.zeros((dst_keys.shape[0], src_rows.shape[1]))
    if src_keys.shape[0] == 0:
        return out
    pos = np.searchsorted(encode_keys_2d(dst_keys), encode_keys_2d(src_keys))
    out[pos] = src_rows
    return out


def gather_positions(src_keys: np.ndarray, dst_keys: np.ndarray) -> np.ndarray:
    """Row index of each src key inside the sorted dst key set."""
    if src_keys.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.searchsorted(encode_keys_2d(dst_keys), encode_keys_2d(src_keys))


def align_grids(grids) -> list:
    """Re-index every grid onto the sorted union of their keys.

    Missing keys get zero feature rows, so an aligned bundle can be fused
    row-by-row without key bookkeeping.
    """
    grids = list(grids)
    if not grids:
        return []
    cfg = grids[0].config
    d = grids[0].dim
    for g in grids[1:]:
        if g.config != cfg:
            raise ConfigError("grids must share voxel_size/range configuration")
        if g.dim != d:
            raise ShapeError("grids must share the feature dimension")
    union = union_keys([g.keys for g in grids])
    return [BevFeatureGrid(union, scatter_rows(g.keys, g.features, union), cfg) for g in grids]


# --- 3D grouping used by the map builders ---------------------------------

_KEY3_BITS = 21
_KEY3_OFF = 1 << (_KEY3_BITS - 1)


@dataclass(frozen=True)
class Voxel3DGrouping:
    """Points bucketed by 3D voxel, in a canonical deterministic order.

    `order` sorts the input so equal-voxel points are contiguous and, within
    a voxel, sorted by (x, y, z). Voxel v owns rows order[starts[v]:starts[v+1]].
    """

    keys: np.ndarray  # (V, 3) int64, sorted lexicographically
    starts: np.ndarray  # (V + 1,) int64 slice bounds into `order`
    order: np.ndarray  # (N,) int64 permutation of the input rows


def group_by_voxel_3d(xyz: np.ndarray, voxel_size: float) -> Voxel3DGrouping:
    if voxel_size <= 0.0:
        raise ConfigError("voxel_size must be positive")
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError("points must be (N, 3)")
    if xyz.shape[0] == 0:
        return Voxel3DGrouping(
            np.zeros((0, 3), dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        )
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    if np.abs(keys).max() >= _KEY3_OFF:
        raise DataError("voxel index exceeds the packed key range")
    codes = (
        ((keys[:, 0] + _KEY3_OFF) << (2 * _KEY3_BITS))
        | ((keys[:, 1] + _KEY3_OFF) << _KEY3_BITS)
        | (keys[:, 2] + _KEY3_OFF)
    )
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], codes))
    sorted_codes = codes[order]
    boundary = np.flatnonzero(np.diff(sorted_codes)) + 1
    starts = np.concatenate([[0], boundary, [order.size]]).astype(np.int64)
    voxel_keys = keys[order[starts[:-1]]]
    return Voxel3DGrouping(voxel_keys, starts, order)
