"""Gaussian prior: LiDAR-based initialization, feature encoding, SH rotation."""
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mapfuse.errors import ConfigError, DataError, ShapeError
from mapfuse.gaussians import (
    FEATURE_DIM,
    GaussianMap,
    flip_gaussian_rotations,
    gaussian_to_feature_points,
    init_gaussians_from_lidar,
    quat_multiply,
    rotate_sh1,
)
from mapfuse.geom import PointCloud, quat_to_matrix


def cloud(xyz, rgb=None):
    xyz = np.asarray(xyz, dtype=np.float64)
    rgb = np.full((len(xyz), 3), 0.5) if rgb is None else np.asarray(rgb, dtype=np.float64)
    return PointCloud(xyz, rgb, np.zeros(len(xyz)), np.zeros(len(xyz), np.int32))


def blob(seed, center, sigma, n=200):
    rng = np.random.default_rng(seed)
    return center + rng.normal(0.0, sigma, size=(n, 3))


def random_unit_quats(seed, n):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q


# --- initialization from lidar ---------------------------------------------------


class TestInitGaussians:
    def test_single_blob_moments(self):
        """R diag(s^2) R^T reproduces the covariance computed by a plain loop."""
        pts = blob(0, np.array([1.5, 1.5, 1.5]), 0.3)
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0)
        assert len(m) == 1
        mean = pts.sum(axis=0) / len(pts)
        np.testing.assert_allclose(m.mu[0], mean, atol=1e-12)
        cov = np.zeros((3, 3))
        for p in pts:
            d = p - mean
            cov += np.outer(d, d)
        cov /= len(pts)
        rot = quat_to_matrix(m.rot[0])
        recon = rot @ np.diag(m.scale[0] ** 2) @ rot.T
        np.testing.assert_allclose(recon, cov, atol=1e-10)

    def test_gray_color_gives_zero_sh0(self):
        pts = blob(1, np.array([0.5, 0.5, 0.5]), 0.2)
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0)
        np.testing.assert_array_equal(m.sh0, np.zeros((1, 3)))

    def test_sh0_inverts_dc_convention(self):
        # c = C0 * sh0 + 0.5 with C0 = 1 / (2 sqrt(pi)), so sh0 = (c - 0.5) * 2 sqrt(pi).
        rgb = np.full((200, 3), [0.8, 0.3, 0.5])
        pts = blob(2, np.array([0.5, 0.5, 0.5]), 0.2)
        m = init_gaussians_from_lidar(cloud(pts, rgb), voxel_size=4.0)
        expected = (np.array([0.8, 0.3, 0.5]) - 0.5) * 2.0 * math.sqrt(math.pi)
        np.testing.assert_allclose(m.sh0[0], expected, atol=1e-8)

    def test_coplanar_points_align_smallest_axis_with_normal(self):
        rng = np.random.default_rng(3)
        pts = np.column_stack(
            [rng.uniform(1.0, 3.0, 400), rng.uniform(1.0, 3.0, 400), np.full(400, 0.7)]
        )
        pts[:, 2] += rng.normal(0.0, 1e-4, 400)
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0)
        assert len(m) == 1
        rot = quat_to_matrix(m.rot[0])
        # Scales come out ascending, so column 0 is the thin direction.
        assert m.scale[0, 0] <= m.scale[0, 1] <= m.scale[0, 2]
        cos = abs(float(rot[:, 0] @ np.array([0.0, 0.0, 1.0])))
        assert cos > math.cos(math.radians(2.0))

    def test_degenerate_voxels_hit_scale_floor(self):
        # Collinear points: two zero eigenvalues, both floored.
        t = np.linspace(0.0, 1.0, 50)
        pts = np.column_stack([t + 1.0, np.full(50, 1.0), np.full(50, 1.0)])
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0, scale_floor=0.05)
        assert len(m) == 1
        assert m.scale[0, 0] == 0.05
        assert m.scale[0, 1] == 0.05
        assert m.scale[0, 2] > 0.05

    def test_opacity_filled_with_alpha_init(self):
        pts = blob(4, np.array([1.0, 1.0, 1.0]), 0.2)
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0, alpha_init=0.25)
        np.testing.assert_array_equal(m.opacity, np.full(1, 0.25))
        # Full opacity is a legal stored value.
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=4.0, alpha_init=1.0)
        assert m.opacity[0] == 1.0

    def test_one_gaussian_per_voxel_sorted_by_key(self):
        rng = np.random.default_rng(5)
        centers = np.array([[3.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.5, 2.5, 0.5], [-1.5, 0.5, 0.5]])
        pts = np.concatenate([c + rng.normal(0.0, 0.05, size=(20, 3)) for c in centers])
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=1.0)
        assert len(m) == 4
        keys = np.floor(m.mu / 1.0).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        np.testing.assert_array_equal(order, np.arange(4))

    def test_min_support_drops_sparse_voxels(self):
        pts = np.array(
            [
                [0.5, 0.5, 0.5],
                [0.6, 0.5, 0.5],
                [0.5, 0.6, 0.5],
                [0.5, 0.5, 0.6],  # four points in voxel (0,0,0)
                [5.5, 0.5, 0.5],
                [5.6, 0.5, 0.5],  # two points in voxel (5,0,0)
            ]
        )
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=1.0, min_support=3)
        assert len(m) == 1
        assert np.floor(m.mu[0, 0]) == 0.0

    def test_empty_and_all_sparse_inputs(self):
        m = init_gaussians_from_lidar(cloud(np.zeros((0, 3))), voxel_size=1.0)
        assert len(m) == 0
        pts = np.array([[0.5, 0.5, 0.5], [5.5, 0.5, 0.5]])
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=1.0, min_support=3)
        assert len(m) == 0

    def test_rotations_are_proper_and_canonical(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0.0, 4.0, size=(3000, 3))
        m = init_gaussians_from_lidar(cloud(pts), voxel_size=1.0)
        assert len(m) > 10
        np.testing.assert_allclose(np.linalg.norm(m.rot, axis=1), 1.0, atol=1e-9)
        assert (m.rot[:, 0] >= 0.0).all()
        for i in range(len(m)):
            r = quat_to_matrix(m.rot[i])
            assert np.linalg.det(r) > 0.0

    def test_config_validation(self):
        pc = cloud(blob(7, np.array([1.0, 1.0, 1.0]), 0.2))
        with pytest.raises(ConfigError):
            init_gaussians_from_lidar(pc, alpha_init=0.0)
        with pytest.raises(ConfigError):
            init_gaussians_from_lidar(pc, alpha_init=1.5)
        with pytest.raises(ConfigError):
            init_gaussians_from_lidar(pc, scale_floor=0.0)


# --- feature encoding ------------------------------------------------------------


def one_gaussian_map(rot=None, scale=None, opacity=0.5, sh0=None, sh1=None):
    return GaussianMap(
        np.array([[1.0, 2.0, 3.0]]),
        np.array([rot if rot is not None else [1.0, 0.0, 0.0, 0.0]]),
        np.array([scale if scale is not None else [0.1, 0.2, 0.3]]),
        np.array([opacity]),
        np.array([sh0 if sh0 is not None else [0.4, 0.5, 0.6]]),
        np.array([sh1 if sh1 is not None else np.arange(9.0).reshape(3, 3)]),
    )


class TestFeatureEncoding:
    def test_row_layout(self):
        m = one_gaussian_map()
        fp = gaussian_to_feature_points(m)
        assert fp.features.shape == (1, FEATURE_DIM)
        row = fp.features[0]
        np.testing.assert_array_equal(row[0:3], [1.0, 2.0, 3.0])
        # Identity rotation encodes as the first two basis columns.
        np.testing.assert_array_equal(row[3:9], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        np.testing.assert_array_equal(row[9:12], np.log([0.1, 0.2, 0.3]))
        assert row[12] == 0.0  # logit(1/2)
        np.testing.assert_array_equal(row[13:16], [0.4, 0.5, 0.6])
        np.testing.assert_array_equal(row[16:25], np.arange(9.0))
        np.testing.assert_array_equal(fp.xyz, m.mu)

    def test_full_opacity_logit_stays_finite(self):
        fp = gaussian_to_feature_points(one_gaussian_map(opacity=1.0))
        assert np.isfinite(fp.features[0, 12])
        assert fp.features[0, 12] > 10.0

    def test_logit_matches_scalar_formula(self):
        for a in (0.1, 0.25, 0.5, 0.9):
            fp = gaussian_to_feature_points(one_gaussian_map(opacity=a))
            assert fp.features[0, 12] == pytest.approx(math.log(a / (1.0 - a)), abs=1e-12)

    def test_rotated_gaussian_encodes_rotation_columns(self):
        q = random_unit_quats(8, 1)[0]
        fp = gaussian_to_feature_points(one_gaussian_map(rot=q))
        r = quat_to_matrix(q)
        np.testing.assert_allclose(fp.features[0, 3:9], np.concatenate([r[:, 0], r[:, 1]]), atol=1e-12)

    def test_empty_map(self):
        fp = gaussian_to_feature_points(GaussianMap.empty())
        assert fp.features.shape == (0, FEATURE_DIM)
        assert fp.xyz.shape == (0, 3)


# --- map validation --------------------------------------------------------------


class TestGaussianMapValidation:
    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            GaussianMap(
                np.zeros((2, 3)), np.zeros((1, 4)), np.ones((2, 3)), np.full(2, 0.5),
                np.zeros((2, 3)), np.zeros((2, 3, 3)),
            )

    def test_non_unit_quaternion(self):
        with pytest.raises(DataError):
            GaussianMap(
                np.zeros((1, 3)), np.array([[2.0, 0.0, 0.0, 0.0]]), np.ones((1, 3)),
                np.full(1, 0.5), np.zeros((1, 3)), np.zeros((1, 3, 3)),
            )

    def test_scale_and_opacity_bounds(self):
        good = dict(
            mu=np.zeros((1, 3)), rot=np.array([[1.0, 0.0, 0.0, 0.0]]),
            sh0=np.zeros((1, 3)), sh1=np.zeros((1, 3, 3)),
        )
        with pytest.raises(DataError):
            GaussianMap(scale=np.array([[0.0, 1.0, 1.0]]), opacity=np.full(1, 0.5), **good)
        with pytest.raises(DataError):
            GaussianMap(scale=np.ones((1, 3)), opacity=np.full(1, 0.0), **good)
        with pytest.raises(DataError):
            GaussianMap(scale=np.ones((1, 3)), opacity=np.full(1, 1.1), **good)

    def test_accessor_round_trip(self):
        m = one_gaussian_map(opacity=0.7)
        g = m.gaussian(0)
        np.testing.assert_array_equal(g.mu, m.mu[0])
        np.testing.assert_array_equal(g.sh1, m.sh1[0])
        assert g.opacity == 0.7


# --- SH rotation -----------------------------------------------------------------


class TestRotateSh1:
    def test_identity_rotation_is_exact(self):
        rng = np.random.default_rng(9)
        sh1 = rng.normal(size=(4, 3, 3))
        out = rotate_sh1(sh1, np.eye(3))
        np.testing.assert_array_equal(out, sh1)

    def test_half_turn_is_involutive(self):
        # diag(-1,-1,1) is exact in floats, so applying it twice is bitwise.
        rng = np.random.default_rng(10)
        sh1 = rng.normal(size=(5, 3, 3))
        half = np.diag([-1.0, -1.0, 1.0])
        np.testing.assert_array_equal(rotate_sh1(rotate_sh1(sh1, half), half), sh1)

    def test_directional_evaluation_transfers(self):
        """Coefficients stored in (y, z, x) order rotate as a vector: the linear
        functional they define satisfies f'(d) = f(R^T d)."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            sh1 = rng.normal(size=(3, 3))
            rot = Rotation.random(random_state=rng).as_matrix()
            out = rotate_sh1(sh1, rot)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            for ch in range(3):
                v = sh1[ch][[2, 0, 1]]  # stored (y, z, x) -> xyz components
                v_rot = out[ch][[2, 0, 1]]
                assert float(v_rot @ d) == pytest.approx(float(v @ (rot.T @ d)), abs=1e-10)

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(12)
        sh1 = rng.normal(size=(6, 3, 3))
        rot = Rotation.random(random_state=rng).as_matrix()
        out = rotate_sh1(sh1, rot)
        for i in range(6):
            np.testing.assert_array_equal(out[i], rotate_sh1(sh1[i], rot))

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            rotate_sh1(np.zeros((3, 2)), np.eye(3))


class TestQuatMultiply:
    def test_matches_scipy_composition(self):
        qs = random_unit_quats(13, 20)
        for i in range(10):
            q1, q2 = qs[2 * i], qs[2 * i + 1]
            got = quat_multiply(q1, q2)
            # scipy uses (x, y, z, w); "q1 applied after q2" is R1 @ R2.
            r1 = Rotation.from_quat(np.roll(q1, -1))
            r2 = Rotation.from_quat(np.roll(q2, -1))
            expected = (r1 * r2).as_matrix()
            np.testing.assert_allclose(quat_to_matrix(got), expected, atol=1e-12)

    def test_identity_is_neutral(self):
        ident = np.array([1.0, 0.0, 0.0, 0.0])
        q = random_unit_quats(14, 1)[0]
        np.testing.assert_allclose(quat_multiply(ident, q), q, atol=1e-15)
        np.testing.assert_allclose(quat_multiply(q, ident), q, atol=1e-15)

    def test_preserves_unit_norm(self):
        qs = random_unit_quats(15, 10)
        for i in range(5):
            out = quat_multiply(qs[2 * i], qs[2 * i + 1])
            assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)


class TestFlipGaussianRotations:
    def test_matrix_conjugation(self):
        # Mirroring across y composes as F R P with F = diag(1,-1,1), P = diag(1,1,-1).
        qs = random_unit_quats(16, 8)
        out = flip_gaussian_rotations(qs)
        flip = np.diag([1.0, -1.0, 1.0])
        post = np.diag([1.0, 1.0, -1.0])
        for i in range(8):
            expected = flip @ quat_to_matrix(qs[i]) @ post
            np.testing.assert_allclose(quat_to_matrix(out[i]), expected, atol=1e-12)
            assert np.linalg.det(quat_to_matrix(out[i])) == pytest.approx(1.0, abs=1e-9)

    def test_double_flip_restores_rotation(self):
        qs = random_unit_quats(17, 6)
        twice = flip_gaussian_rotations(flip_gaussian_rotations(qs))
        for i in range(6):
            np.testing.assert_allclose(quat_to_matrix(twice[i]), quat_to_matrix(qs[i]), atol=1e-12)

    def test_outputs_stay_unit(self):
        qs = random_unit_quats(18, 6)
        out = flip_gaussian_rotations(qs)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
