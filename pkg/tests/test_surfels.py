"""Surfel map construction: dynamic-point removal, PCA normals, tiling."""
import math

import numpy as np
import pytest

from mapfuse.errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    InsufficientSupportError,
)
from mapfuse.geom import Box3D, PointCloud, point_in_box
from mapfuse.surfels import (
    SurfelMap,
    build_surfels,
    build_surfels_tiled,
    build_surfels_with_report,
    estimate_normal,
    remove_dynamic_points,
    surfel_to_feature_points,
)


def cloud(xyz, rgb=None):
    xyz = np.asarray(xyz, dtype=np.float64)
    rgb = np.full((len(xyz), 3), 0.5) if rgb is None else np.asarray(rgb, dtype=np.float64)
    return PointCloud(xyz, rgb, np.zeros(len(xyz)), np.zeros(len(xyz), np.int32))


def plane_cloud(seed, normal, offset, n=300, extent=1.0, noise=0.0):
    """Points on the plane n . x = offset, jittered along the normal by `noise`."""
    rng = np.random.default_rng(seed)
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    # Build an in-plane basis.
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    uv = rng.uniform(-extent, extent, size=(n, 2))
    pts = offset * normal + uv[:, :1] * u + uv[:, 1:] * v
    if noise > 0.0:
        pts = pts + rng.normal(0.0, noise, size=(n, 1)) * normal
    return pts


# --- dynamic point removal -------------------------------------------------------


class TestRemoveDynamicPoints:
    def test_matches_per_point_loop(self):
        rng = np.random.default_rng(2)
        pc = cloud(rng.uniform(-3, 3, size=(200, 3)))
        boxes = [
            Box3D(rng.uniform(-2, 2, size=3), rng.uniform(0.5, 2.0, size=3), rng.uniform(-math.pi, math.pi))
            for _ in range(3)
        ]
        out = remove_dynamic_points(pc, boxes, margin=0.1)
        keep = [i for i, p in enumerate(pc.xyz) if not any(point_in_box(p, b, 0.1) for b in boxes)]
        np.testing.assert_array_equal(out.xyz, pc.xyz[keep])
        np.testing.assert_array_equal(out.rgb, pc.rgb[keep])

    def test_no_boxes_is_identity(self):
        pc = cloud([[0.0, 0.0, 0.0]])
        assert remove_dynamic_points(pc, []) is pc

    def test_all_points_inside_yields_empty(self):
        pc = cloud(np.random.default_rng(0).uniform(-0.4, 0.4, size=(50, 3)))
        out = remove_dynamic_points(pc, [Box3D(np.zeros(3), np.ones(3), 0.0)])
        assert len(out) == 0

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        pc = cloud(rng.uniform(-3, 3, size=(100, 3)))
        boxes = [Box3D(np.zeros(3), np.ones(3) * 2.0, 0.4)]
        once = remove_dynamic_points(pc, boxes, 0.05)
        twice = remove_dynamic_points(once, boxes, 0.05)
        np.testing.assert_array_equal(once.xyz, twice.xyz)

    def test_negative_margin_rejected(self):
        with pytest.raises(DataError):
            remove_dynamic_points(cloud([[0.0, 0.0, 0.0]]), [Box3D(np.zeros(3), np.ones(3), 0.0)], -0.1)


# --- normal estimation -----------------------------------------------------------


def test_normal_of_horizontal_plane_points_up():
    pts = plane_cloud(1, [0.0, 0.0, 1.0], 0.0, n=50)
    n = estimate_normal(pts, reference_origin=[0.0, 0.0, 5.0])
    np.testing.assert_allclose(n, [0.0, 0.0, 1.0], atol=1e-9)


def test_normal_flips_toward_reference_origin():
    pts = plane_cloud(1, [0.0, 0.0, 1.0], 0.0, n=50)
    n = estimate_normal(pts, reference_origin=[0.0, 0.0, -5.0])
    np.testing.assert_allclose(n, [0.0, 0.0, -1.0], atol=1e-9)


def test_noiseless_normals_reach_analytic_accuracy():
    rng = np.random.default_rng(10)
    for trial in range(10):
        true_n = rng.normal(size=3)
        true_n /= np.linalg.norm(true_n)
        pts = plane_cloud(trial, true_n, offset=rng.uniform(-1, 1))
        n = estimate_normal(pts, reference_origin=pts.mean(axis=0) + true_n)
        angle = math.acos(min(1.0, abs(float(n @ true_n))))
        assert angle < 1e-6


def test_noisy_normals_stay_within_two_degrees():
    rng = np.random.default_rng(20)
    for trial in range(10):
        true_n = rng.normal(size=3)
        true_n /= np.linalg.norm(true_n)
        pts = plane_cloud(100 + trial, true_n, offset=0.0, n=300, noise=0.005)
        n = estimate_normal(pts, reference_origin=true_n * 3.0)
        angle = math.acos(min(1.0, abs(float(n @ true_n))))
        assert angle < math.radians(2.0)


def test_normal_requires_min_support():
    with pytest.raises(InsufficientSupportError):
        estimate_normal(np.zeros((2, 3)), [0.0, 0.0, 1.0])


def test_collinear_points_are_degenerate():
    pts = np.outer(np.linspace(0, 1, 8), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateGeometryError):
        estimate_normal(pts, [0.0, 0.0, 1.0])


# --- map construction ------------------------------------------------------------


def test_build_surfels_single_voxel_hand_case():
    pts = np.array([[0.02, 0.02, 0.0], [0.2, 0.05, 0.0], [0.1, 0.21, 0.0]])
    rgb = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = build_surfels(cloud(pts, rgb), voxel_size=0.25, sensor_origin=(0.0, 0.0, 2.0))
    assert len(m) == 1
    np.testing.assert_allclose(m.positions[0], pts.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(m.normals[0], [0.0, 0.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(m.colors[0], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    assert m.support[0] == 3


def test_build_surfels_report_counts_skips():
    # Voxel at origin has 2 points (low support), voxel at x=1 has 3 collinear
    # points (degenerate), voxel at x=2 has a proper triangle.
    pts = [[0.1, 0.1, 0.0], [0.2, 0.1, 0.0]]
    pts += [[1.1 + 0.05 * i, 0.1, 0.0] for i in range(3)]
    pts += [[2.05, 0.05, 0.0], [2.2, 0.05, 0.0], [2.1, 0.2, 0.0]]
    m, report = build_surfels_with_report(cloud(pts), voxel_size=0.25)
    assert len(m) == 1
    assert report.voxels_seen == 3
    assert report.skipped_low_support == 1
    assert report.skipped_degenerate == 1


def test_surfels_sorted_by_voxel_key_and_normals_unit():
    rng = np.random.default_rng(42)
    pts = plane_cloud(42, [0.0, 0.0, 1.0], 0.0, n=2000, extent=2.0, noise=0.003)
    m = build_surfels(cloud(pts), voxel_size=0.25, sensor_origin=(0.0, 0.0, 5.0))
    assert len(m) > 10
    keys = m.voxel_keys()
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    np.testing.assert_array_equal(order, np.arange(len(m)))
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-12)
    # The sensor origin sits above the plane, so every normal points up.
    assert (m.normals[:, 2] > 0.0).all()


def test_surfel_positions_stay_on_noiseless_plane():
    pts = plane_cloud(3, [0.3, -0.2, 0.93], 0.4, n=3000, extent=2.0)
    m = build_surfels(cloud(pts), voxel_size=0.25)
    true_n = np.array([0.3, -0.2, 0.93])
    true_n /= np.linalg.norm(true_n)
    # Surfel centroids are means of in-plane points, so they satisfy the
    # plane equation to rounding error, far inside the half-voxel bound.
    residual = np.abs(m.positions @ true_n - 0.4)
    assert residual.max() < 0.25 / 2.0
    assert residual.max() < 1e-9


def test_build_surfels_empty_cloud():
    m = build_surfels(PointCloud.empty(), voxel_size=0.25)
    assert len(m) == 0


# --- tiled builds -----------------------------------------------------------------


def scene_like_cloud(seed, n=4000):
    rng = np.random.default_rng(seed)
    ground = np.column_stack([rng.uniform(-4, 4, n // 2), rng.uniform(-4, 4, n // 2), np.zeros(n // 2)])
    wall = np.column_stack([np.full(n // 2, 3.0), rng.uniform(-4, 4, n // 2), rng.uniform(0, 2, n // 2)])
    pts = np.vstack([ground, wall]) + rng.normal(0, 0.004, size=(n, 3))
    return cloud(pts, rng.uniform(0, 1, size=(n, 3)))


def test_tiled_build_equals_untiled_bitwise():
    pc = scene_like_cloud(8)
    whole, _ = build_surfels_with_report(pc, voxel_size=0.25)
    for tile_size in (8.0, 2.0):
        tiled, report = build_surfels_tiled(pc, voxel_size=0.25, tile_size=tile_size)
        np.testing.assert_array_equal(tiled.positions, whole.positions)
        np.testing.assert_array_equal(tiled.normals, whole.normals)
        np.testing.assert_array_equal(tiled.colors, whole.colors)
        np.testing.assert_array_equal(tiled.support, whole.support)
        assert report.voxels_seen > 0


def test_tiled_build_parallel_workers_identical():
    pc = scene_like_cloud(9)
    one, _ = build_surfels_tiled(pc, voxel_size=0.25, tile_size=2.0, jobs=1)
    four, _ = build_surfels_tiled(pc, voxel_size=0.25, tile_size=2.0, jobs=4)
    np.testing.assert_array_equal(one.positions, four.positions)
    np.testing.assert_array_equal(one.normals, four.normals)
    np.testing.assert_array_equal(one.support, four.support)


def test_tile_size_must_be_a_voxel_multiple():
    with pytest.raises(ConfigError):
        build_surfels_tiled(scene_like_cloud(1, n=40), voxel_size=0.25, tile_size=0.9)


# --- feature encoding --------------------------------------------------------------


def test_surfel_feature_rows():
    m = SurfelMap(
        0.25,
        np.array([[0.0, 0.0, 0.0]]),
        np.array([[0.0, 0.0, 1.0]]),
        np.array([[1.0, 0.0, 0.0]]),
        np.array([1]),
    )
    fp = surfel_to_feature_points(m)
    np.testing.assert_array_equal(fp.features, [[0, 0, 0, 0, 0, 1, 1, 0, 0, 0]])
    np.testing.assert_array_equal(fp.xyz, m.positions)


def test_surfel_feature_log_support():
    m = SurfelMap(
        0.25,
        np.zeros((1, 3)),
        np.array([[1.0, 0.0, 0.0]]),
        np.zeros((1, 3)),
        np.array([20]),
    )
    assert surfel_to_feature_points(m).features[0, 9] == pytest.approx(math.log(20.0))


def test_empty_map_features():
    fp = surfel_to_feature_points(SurfelMap.empty())
    assert fp.features.shape == (0, 10)


def test_surfelmap_rejects_non_unit_normals():
    with pytest.raises(DataError):
        SurfelMap(0.25, np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]), np.zeros((1, 3)), np.array([3]))
