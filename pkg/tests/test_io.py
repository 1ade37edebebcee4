"""File formats: binary round trips, corruption detection, config parsing."""
import struct

import numpy as np
import pytest

from mapfuse.detection import Detection, GroundTruth
from mapfuse.errors import ConfigError, DataError, DecodeError
from mapfuse.gaussians import GaussianMap
from mapfuse.geom import Box3D, PointCloud
from mapfuse.model import Detector, ModelConfig
from mapfuse.formats import (
    parse_train_config,
    read_detections,
    read_gaussianmap,
    read_ground_truth,
    read_loss_log,
    read_model,
    read_pointcloud,
    read_surfelmap,
    write_detections,
    write_gaussianmap,
    write_ground_truth,
    write_loss_log,
    write_model,
    write_pointcloud,
    write_surfelmap,
)
from mapfuse.surfels import SurfelMap
from mapfuse.train import TrainConfig


def f32_cloud(n=16, seed=0):
    """A cloud whose payload sits exactly on the serialized grid."""
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64)
    rgb = rng.integers(0, 256, size=(n, 3)) / 255.0
    intensity = rng.random(n).astype(np.float32).astype(np.float64)
    traversal = rng.integers(0, 4, n).astype(np.int32)
    return PointCloud(xyz, rgb, intensity, traversal)


def sample_surfels():
    pos = np.array([[0.5, -1.25, 3.0], [2.0, 0.75, -0.5]])
    nrm = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    colors = np.array([[10, 200, 30], [0, 128, 255]]) / 255.0
    support = np.array([7, 12], dtype=np.int64)
    return SurfelMap(0.25, pos, nrm, colors, support)


def sample_gaussians():
    mu = np.array([[0.5, 1.0, -2.0], [3.25, -0.75, 0.125]])
    rot = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    scale = np.array([[0.25, 0.5, 1.0], [0.125, 0.25, 0.5]])
    opacity = np.array([0.5, 0.75])
    sh0 = np.array([[0.5, -0.25, 0.0], [1.0, 0.5, -0.5]])
    sh1 = np.arange(18).reshape(2, 3, 3) / 16.0
    return GaussianMap(mu, rot, scale, opacity, sh0, sh1)


MODEL_CFG = ModelConfig(d=8, head_hidden=8, n_bins=4, voxel_size=1.2, bev_range=12.0)


class TestPointCloudFormat:
    def test_round_trip_exact(self, tmp_path):
        pc = f32_cloud()
        p = tmp_path / "a.mppc"
        write_pointcloud(p, pc)
        back = read_pointcloud(p)
        np.testing.assert_array_equal(back.xyz, pc.xyz)
        np.testing.assert_array_equal(back.rgb, pc.rgb)
        np.testing.assert_array_equal(back.intensity, pc.intensity)
        np.testing.assert_array_equal(back.traversal, pc.traversal)

    def test_read_then_write_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_pointcloud(a, f32_cloud(seed=3))
        write_pointcloud(b, read_pointcloud(a))
        assert a.read_bytes() == b.read_bytes()

    def test_empty(self, tmp_path):
        p = tmp_path / "e"
        write_pointcloud(p, PointCloud.empty())
        assert len(read_pointcloud(p)) == 0

    def test_bad_magic_offset_0(self, tmp_path):
        p = tmp_path / "a"
        write_pointcloud(p, f32_cloud())
        buf = bytearray(p.read_bytes())
        buf[0] = ord("X")
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="offset 0"):
            read_pointcloud(p)

    def test_bad_version_offset_4(self, tmp_path):
        p = tmp_path / "a"
        write_pointcloud(p, f32_cloud())
        buf = bytearray(p.read_bytes())
        buf[4:6] = struct.pack("<H", 99)
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="version 99 at offset 4"):
            read_pointcloud(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "a"
        p.write_bytes(b"MPP")
        with pytest.raises(DecodeError, match="truncated header"):
            read_pointcloud(p)

    def test_payload_size_mismatch(self, tmp_path):
        p = tmp_path / "a"
        write_pointcloud(p, f32_cloud())
        buf = p.read_bytes()
        p.write_bytes(buf[:-5])
        with pytest.raises(DecodeError, match="payload size mismatch"):
            read_pointcloud(p)
        p.write_bytes(buf + b"!")
        with pytest.raises(DecodeError, match="payload size mismatch"):
            read_pointcloud(p)

    def test_traversal_range_enforced(self, tmp_path):
        pc = f32_cloud(4)
        bad = PointCloud(pc.xyz, pc.rgb, pc.intensity, np.full(4, 70000, dtype=np.int32))
        with pytest.raises(DataError):
            write_pointcloud(tmp_path / "a", bad)


class TestSurfelFormat:
    def test_round_trip_exact(self, tmp_path):
        m = sample_surfels()
        p = tmp_path / "a.mpsf"
        write_surfelmap(p, m)
        back = read_surfelmap(p)
        assert back.voxel_size == 0.25
        np.testing.assert_array_equal(back.positions, m.positions)
        np.testing.assert_array_equal(back.normals, m.normals)
        np.testing.assert_array_equal(back.colors, m.colors)
        np.testing.assert_array_equal(back.support, m.support)

    def test_read_then_write_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_surfelmap(a, sample_surfels())
        write_surfelmap(b, read_surfelmap(a))
        assert a.read_bytes() == b.read_bytes()

    def test_f32_quantization_is_stable(self, tmp_path):
        # Arbitrary doubles land on the f32 grid once, then stay put.
        m = sample_surfels()
        wiggle = SurfelMap(m.voxel_size, m.positions + 1e-12, m.normals, m.colors, m.support)
        a, b = tmp_path / "a", tmp_path / "b"
        write_surfelmap(a, wiggle)
        once = read_surfelmap(a)
        np.testing.assert_array_equal(
            once.positions, (wiggle.positions.astype(np.float32)).astype(np.float64)
        )
        write_surfelmap(b, once)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a"
        write_surfelmap(p, sample_surfels())
        buf = bytearray(p.read_bytes())
        buf[:4] = b"MPPC"
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="bad magic"):
            read_surfelmap(p)


class TestGaussianFormat:
    def test_round_trip_exact(self, tmp_path):
        m = sample_gaussians()
        p = tmp_path / "a.mpgs"
        write_gaussianmap(p, m)
        back = read_gaussianmap(p)
        np.testing.assert_array_equal(back.mu, m.mu)
        np.testing.assert_array_equal(back.rot, m.rot)
        np.testing.assert_array_equal(back.scale, m.scale)
        np.testing.assert_array_equal(back.opacity, m.opacity)
        np.testing.assert_array_equal(back.sh0, m.sh0)
        np.testing.assert_array_equal(back.sh1, m.sh1)

    def test_read_then_write_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_gaussianmap(a, sample_gaussians())
        write_gaussianmap(b, read_gaussianmap(a))
        assert a.read_bytes() == b.read_bytes()

    def test_empty(self, tmp_path):
        p = tmp_path / "e"
        write_gaussianmap(p, GaussianMap.empty())
        assert len(read_gaussianmap(p)) == 0

    def test_corrupt_payload_rejected(self, tmp_path):
        # A non-unit quaternion on disk fails map validation on read.
        p = tmp_path / "a"
        write_gaussianmap(p, sample_gaussians())
        buf = bytearray(p.read_bytes())
        off = 14 + 12  # first record, quat w component
        buf[off : off + 4] = struct.pack("<f", 5.0)
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="invalid payload"):
            read_gaussianmap(p)


class TestModelFormat:
    def test_round_trip(self, tmp_path):
        det = Detector(MODEL_CFG, seed=3)
        p = tmp_path / "m.mpwt"
        write_model(p, det)
        back = read_model(p)
        assert back.config == det.config
        assert set(back.params) == set(det.params)
        for name in det.params:
            want = det.params[name].astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(back.params[name], want)

    def test_read_then_write_bitwise(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_model(a, Detector(MODEL_CFG, seed=3))
        write_model(b, read_model(a))
        assert a.read_bytes() == b.read_bytes()

    def test_strategy_round_trips(self, tmp_path):
        for strategy in ("gated", "concat", "none"):
            cfg = ModelConfig(d=4, head_hidden=4, n_bins=4, strategy=strategy)
            p = tmp_path / f"{strategy}.mpwt"
            write_model(p, Detector(cfg, seed=0))
            assert read_model(p).config.strategy == strategy

    def test_bogus_strategy_rejected(self, tmp_path):
        p = tmp_path / "a"
        write_model(p, Detector(MODEL_CFG, seed=0))
        buf = bytearray(p.read_bytes())
        buf[14:26] = b"bogus".ljust(12, b"\0")
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="invalid model header"):
            read_model(p)

    def test_header_payload_consistency_enforced(self, tmp_path):
        # Shrinking d in the header makes every stored tensor the wrong shape.
        p = tmp_path / "a"
        write_model(p, Detector(MODEL_CFG, seed=0))
        buf = bytearray(p.read_bytes())
        buf[6:8] = struct.pack("<H", 4)
        p.write_bytes(bytes(buf))
        with pytest.raises(DecodeError, match="shape"):
            read_model(p)

    def test_truncated_tensor_data(self, tmp_path):
        p = tmp_path / "a"
        write_model(p, Detector(MODEL_CFG, seed=0))
        buf = p.read_bytes()
        p.write_bytes(buf[:-9])
        with pytest.raises(DecodeError, match="truncated tensor data"):
            read_model(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "a"
        write_model(p, Detector(MODEL_CFG, seed=0))
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(DecodeError, match="trailing bytes"):
            read_model(p)


def det(x, y, score, cls=0):
    return Detection(Box3D(np.array([x, y, 0.5]), np.array([2.0, 1.0, 1.0]), 0.25), score, cls)


class TestDetectionJsonl:
    def test_round_trip_with_sparse_frames(self, tmp_path):
        frames = [[det(0, 0, 0.9), det(3, 1, 0.4, cls=1)], [], [det(-2, 5, 0.7)]]
        p = tmp_path / "d.jsonl"
        write_detections(p, frames)
        back = read_detections(p)
        assert [len(f) for f in back] == [2, 0, 1]
        for fa, fb in zip(frames, back):
            for a, b in zip(fa, fb):
                np.testing.assert_array_equal(a.box.center, b.box.center)
                np.testing.assert_array_equal(a.box.dims, b.box.dims)
                assert a.box.yaw == b.box.yaw
                assert a.score == b.score and a.class_id == b.class_id

    def test_flat_list_form(self, tmp_path):
        p = tmp_path / "d.jsonl"
        write_detections(p, [det(0, 0, 0.5)])
        back = read_detections(p)
        assert len(back) == 1 and len(back[0]) == 1

    def test_defaults_and_blank_lines(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"center": [1, 2, 0.5], "dims": [2, 1, 1], "yaw": 0.0, "class": 0}\n\n')
        back = read_detections(p)
        assert back[0][0].score == 1.0

    def test_bad_record_names_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        good = '{"frame": 0, "center": [1, 2, 0.5], "dims": [2, 1, 1], "yaw": 0.0, "class": 0}'
        p.write_text(good + '\n{"frame": 1, "center": [0, 0, 0]}\n')
        with pytest.raises(DecodeError, match="line 2"):
            read_detections(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        assert read_detections(p) == []

    def test_ground_truth_round_trip(self, tmp_path):
        frames = [[GroundTruth(det(1, 1, 1.0).box, 0)], [GroundTruth(det(2, 2, 1.0).box, 1)]]
        p = tmp_path / "g.jsonl"
        write_ground_truth(p, frames)
        back = read_ground_truth(p)
        assert all(isinstance(g, GroundTruth) for frame in back for g in frame)
        assert back[1][0].class_id == 1
        np.testing.assert_array_equal(back[0][0].box.center, frames[0][0].box.center)


class TestLossLog:
    def test_repr_round_trip(self, tmp_path):
        rows = [(0, 1.2345678901234567, 0.1, 1.0 / 3.0, 2.0e-17), (1, 0.5, 0.25, 0.125, 0.0)]
        p = tmp_path / "log.csv"
        write_loss_log(p, rows)
        assert read_loss_log(p) == rows

    def test_numpy_scalars_accepted(self, tmp_path):
        rows = [(0, np.float64(1.0 / 7.0), np.float64(0.1), np.float64(0.2), np.float64(0.3))]
        p = tmp_path / "log.csv"
        write_loss_log(p, rows)
        back = read_loss_log(p)
        assert back[0][1] == 1.0 / 7.0

    def test_header_checked(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("a,b\n")
        with pytest.raises(DecodeError, match="header"):
            read_loss_log(p)


class TestTrainConfigFile:
    def test_full_parse(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text(
            "[train]\n"
            "steps = 42\n"
            "lr = 0.005\n"
            "scale_range = 0.9, 1.1\n"
            "augment = yes\n"
            "mix_modality = false\n"
            "[model]\n"
            "d = 16\n"
            "strategy = concat\n"
            "voxel_size = 1.2\n"
            "[loss]\n"
            "lambda_seg = 0.25\n"
        )
        train, model = parse_train_config(p)
        assert train.steps == 42 and train.lr == 0.005
        assert train.scale_range == (0.9, 1.1)
        assert train.augment is True and train.mix_modality is False
        assert train.loss.lambda_seg == 0.25
        assert model.d == 16 and model.strategy == "concat" and model.voxel_size == 1.2

    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[train]\n")
        train, model = parse_train_config(p)
        assert train == TrainConfig()
        assert model == ModelConfig()

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.ini"
        p.write_text("[train]\nlearning_rate = 3\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_train_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            parse_train_config(tmp_path / "nope.ini")
