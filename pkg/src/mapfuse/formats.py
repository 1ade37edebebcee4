"""Bit-exact file formats: point clouds, maps, model weights, logs.

All binary formats are packed little-endian with a 4-byte ASCII magic and a
u16 version. Readers validate every domain invariant and raise DecodeError
naming the byte offset; read-then-write reproduces the file bitwise.
Floating payloads are f32 on disk (f64 in memory); model-config scalars in
the weight header stay f64 so a reloaded model decodes identically.
"""
from __future__ import annotations

import csv
import io
import json
import struct

import numpy as np

from .detection import Detection, GroundTruth
from .errors import ConfigError, DataError, DecodeError
from .gaussians import GaussianMap
from .geom import Box3D, PointCloud
from .model import Detector, ModelConfig
from .surfels import SurfelMap

FORMAT_VERSION = 1

_PC_HEADER = struct.Struct("<4sHQ")
_PC_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("r", "u1"), ("g", "u1"), ("b", "u1"),
        ("intensity", "<f4"), ("traversal", "<u2"),
    ]
)

_SF_HEADER = struct.Struct("<4sHQf")
_SF_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("r", "u1"), ("g", "u1"), ("b", "u1"),
        ("support", "<u4"),
    ]
)

_GS_HEADER = struct.Struct("<4sHQ")
_GS_DTYPE = np.dtype(
    [
        ("mu", "<f4", (3,)), ("quat", "<f4", (4,)), ("scale", "<f4", (3,)),
        ("opacity", "<f4"), ("sh0", "<f4", (3,)), ("sh1", "<f4", (9,)),
    ]
)

_WT_HEADER = struct.Struct("<4sHHHHH12sddddI")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _check_header(buf: bytes, header: struct.Struct, magic: bytes, path):
    if len(buf) < header.size:
        raise DecodeError(f"{path}: truncated header, {len(buf)} bytes at offset 0")
    fields = header.unpack_from(buf)
    if fields[0] != magic:
        raise DecodeError(f"{path}: bad magic {fields[0]!r} at offset 0, expected {magic!r}")
    if fields[1] != FORMAT_VERSION:
        raise DecodeError(f"{path}: unsupported version {fields[1]} at offset 4")
    return fields


def _check_payload(buf: bytes, offset: int, count: int, itemsize: int, path):
    expected = offset + count * itemsize
    if len(buf) != expected:
        raise DecodeError(
            f"{path}: payload size mismatch at offset {offset}: have {len(buf) - offset} bytes, need {count * itemsize}"
        )


def _quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.round(rgb * 255.0).astype(np.uint8)


# --- point clouds (MPPC) -------------------------------------------------------


def write_pointcloud(path, pc: PointCloud):
    if len(pc) and (pc.traversal.min() < 0 or pc.traversal.max() > 0xFFFF):
        raise DataError("traversal ids must fit in u16 for serialization")
    rec = np.empty(len(pc), dtype=_PC_DTYPE)
    rec["x"], rec["y"], rec["z"] = pc.xyz[:, 0], pc.xyz[:, 1], pc.xyz[:, 2]
    q = _quantize_rgb(pc.rgb)
    rec["r"], rec["g"], rec["b"] = q[:, 0], q[:, 1], q[:, 2]
    rec["intensity"] = pc.intensity
    rec["traversal"] = pc.traversal.astype(np.uint16)
    with open(path, "wb") as f:
        f.write(_PC_HEADER.pack(b"MPPC", FORMAT_VERSION, len(pc)))
        f.write(rec.tobytes())


def read_pointcloud(path) -> PointCloud:
    buf = _read_bytes(path)
    _, _, count = _check_header(buf, _PC_HEADER, b"MPPC", path)
    _check_payload(buf, _PC_HEADER.size, count, _PC_DTYPE.itemsize, path)
    rec = np.frombuffer(buf, dtype=_PC_DTYPE, count=count, offset=_PC_HEADER.size)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    rgb = np.stack([rec["r"], rec["g"], rec["b"]], axis=1).astype(np.float64) / 255.0
    try:
        return PointCloud(xyz, rgb, rec["intensity"].astype(np.float64), rec["traversal"].astype(np.int32))
    except DataError as e:
        raise DecodeError(f"{path}: invalid payload at offset {_PC_HEADER.size}: {e}") from e


# --- surfel maps (MPSF) ---------------------------------------------------------


def write_surfelmap(path, m: SurfelMap):
    if len(m) and m.support.max() > 0xFFFFFFFF:
        raise DataError("support counts must fit in u32 for serialization")
    rec = np.empty(len(m), dtype=_SF_DTYPE)
    rec["x"], rec["y"], rec["z"] = m.positions[:, 0], m.positions[:, 1], m.positions[:, 2]
    rec["nx"], rec["ny"], rec["nz"] = m.normals[:, 0], m.normals[:, 1], m.normals[:, 2]
    q = _quantize_rgb(m.colors)
    rec["r"], rec["g"], rec["b"] = q[:, 0], q[:, 1], q[:, 2]
    rec["support"] = m.support.astype(np.uint32)
    with open(path, "wb") as f:
        f.write(_SF_HEADER.pack(b"MPSF", FORMAT_VERSION, len(m), m.voxel_size))
        f.write(rec.tobytes())


def read_surfelmap(path) -> SurfelMap:
    buf = _read_bytes(path)
    _, _, count, voxel_size = _check_header(buf, _SF_HEADER, b"MPSF", path)
    _check_payload(buf, _SF_HEADER.size, count, _SF_DTYPE.itemsize, path)
    rec = np.frombuffer(buf, dtype=_SF_DTYPE, count=count, offset=_SF_HEADER.size)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    nrm = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    rgb = np.stack([rec["r"], rec["g"], rec["b"]], axis=1).astype(np.float64) / 255.0
    try:
        return SurfelMap(float(voxel_size), pos, nrm, rgb, rec["support"].astype(np.int64))
    except DataError as e:
        raise DecodeError(f"{path}: invalid payload at offset {_SF_HEADER.size}: {e}") from e


# --- gaussian maps (MPGS) --------------------------------------------------------


def write_gaussianmap(path, m: GaussianMap):
    rec = np.empty(len(m), dtype=_GS_DTYPE)
    rec["mu"] = m.mu
    rec["quat"] = m.rot
    rec["scale"] = m.scale
    rec["opacity"] = m.opacity
    rec["sh0"] = m.sh0
    rec["sh1"] = m.sh1.reshape(len(m), 9)
    with open(path, "wb") as f:
        f.write(_GS_HEADER.pack(b"MPGS", FORMAT_VERSION, len(m)))
        f.write(rec.tobytes())


def read_gaussianmap(path) -> GaussianMap:
    buf = _read_bytes(path)
    _, _, count = _check_header(buf, _GS_HEADER, b"MPGS", path)
    _check_payload(buf, _GS_HEADER.size, count, _GS_DTYPE.itemsize, path)
    rec = np.frombuffer(buf, dtype=_GS_DTYPE, count=count, offset=_GS_HEADER.size)
    try:
        return GaussianMap(
            rec["mu"].astype(np.float64).reshape(count, 3),
            rec["quat"].astype(np.float64).reshape(count, 4),
            rec["scale"].astype(np.float64).reshape(count, 3),
            rec["opacity"].astype(np.float64).reshape(count),
            rec["sh0"].astype(np.float64).reshape(count, 3),
            rec["sh1"].astype(np.float64).reshape(count, 3, 3),
        )
    except DataError as e:
        raise DecodeError(f"{path}: invalid payload at offset {_GS_HEADER.size}: {e}") from e


# --- model weights (MPWT) ---------------------------------------------------------


def write_model(path, detector: Detector):
    cfg = detector.config
    names = detector.tensor_names()
    strategy = cfg.strategy.encode()
    if len(strategy) > 12:
        raise DataError("strategy name longer than the 12-byte header field")
    out = io.BytesIO()
    out.write(
        _WT_HEADER.pack(
            b"MPWT",
            FORMAT_VERSION,
            cfg.d,
            cfg.n_classes,
            cfg.n_bins,
            cfg.head_hidden,
            strategy.ljust(12, b"\0"),
            cfg.voxel_size,
            cfg.bev_range,
            cfg.score_threshold,
            cfg.nms_iou,
            len(names),
        )
    )
    for name in names:
        arr = detector.params[name]
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(out.getvalue())


def read_model(path) -> Detector:
    buf = _read_bytes(path)
    fields = _check_header(buf, _WT_HEADER, b"MPWT", path)
    (_, _, d, n_classes, n_bins, head_hidden, strategy, voxel_size, bev_range, score_thr, nms_iou, n_tensors) = fields
    try:
        cfg = ModelConfig(
            d=int(d),
            n_classes=int(n_classes),
            n_bins=int(n_bins),
            head_hidden=int(head_hidden),
            strategy=strategy.rstrip(b"\0").decode(),
            voxel_size=float(voxel_size),
            bev_range=float(bev_range),
            score_threshold=float(score_thr),
            nms_iou=float(nms_iou),
        )
    except (ConfigError, UnicodeDecodeError) as e:
        raise DecodeError(f"{path}: invalid model header at offset 4: {e}") from e

    params = {}
    off = _WT_HEADER.size
    for _ in range(int(n_tensors)):
        if off + 2 > len(buf):
            raise DecodeError(f"{path}: truncated tensor name length at offset {off}")
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + name_len + 1 > len(buf):
            raise DecodeError(f"{path}: truncated tensor name at offset {off}")
        name = buf[off : off + name_len].decode(errors="replace")
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        if off + 4 * ndim > len(buf):
            raise DecodeError(f"{path}: truncated tensor shape at offset {off}")
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = size * 4
        if off + nbytes > len(buf):
            raise DecodeError(f"{path}: truncated tensor data for {name} at offset {off}")
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(shape)
        params[name] = data
        off += nbytes
    if off != len(buf):
        raise DecodeError(f"{path}: {len(buf) - off} trailing bytes at offset {off}")

    expected = _expected_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DecodeError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DecodeError(f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}")
    return Detector(cfg, params=params)


def _expected_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    for spec in Detector._build_specs(cfg).values():
        for i in range(spec.n_layers):
            shapes[spec.weight_name(i)] = (spec.dims[i], spec.dims[i + 1])
            if spec.bias:
                shapes[spec.bias_name(i)] = (spec.dims[i + 1],)
    return shapes


# --- detections and ground truth (JSONL) -------------------------------------------


def write_detections(path, frames):
    """frames: list of per-frame Detection lists, or one flat list."""
    if frames and isinstance(frames[0], Detection):
        frames = [frames]
    with open(path, "w") as f:
        for fi, dets in enumerate(frames):
            for d in dets:
                rec = {
                    "frame": fi,
                    "center": [float(v) for v in d.box.center],
                    "dims": [float(v) for v in d.box.dims],
                    "yaw": float(d.box.yaw),
                    "class": int(d.class_id),
                    "score": float(d.score),
                }
                f.write(json.dumps(rec) + "\n")


def read_detections(path):
    """List of per-frame Detection lists (frame indices may be sparse)."""
    frames = {}
    with open(path) as f:
        for ln, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(
                    Box3D(np.asarray(rec["center"], dtype=np.float64), np.asarray(rec["dims"], dtype=np.float64), float(rec["yaw"])),
                    float(rec.get("score", 1.0)),
                    int(rec["class"]),
                )
            except (KeyError, ValueError, TypeError, DataError) as e:
                raise DecodeError(f"{path}: bad detection record on line {ln + 1}: {e}") from e
            frames.setdefault(int(rec.get("frame", 0)), []).append(det)
    if not frames:
        return []
    return [frames.get(i, []) for i in range(max(frames) + 1)]


def write_ground_truth(path, frames):
    if frames and isinstance(frames[0], GroundTruth):
        frames = [frames]
    with open(path, "w") as f:
        for fi, gts in enumerate(frames):
            for g in gts:
                rec = {
                    "frame": fi,
                    "center": [float(v) for v in g.box.center],
                    "dims": [float(v) for v in g.box.dims],
                    "yaw": float(g.box.yaw),
                    "class": int(g.class_id),
                }
                f.write(json.dumps(rec) + "\n")


def read_ground_truth(path):
    det_frames = read_detections(path)
    return [[GroundTruth(d.box, d.class_id) for d in frame] for frame in det_frames]


# --- loss logs (CSV) ---------------------------------------------------------------


def write_loss_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step", "total", "hm", "bbox", "seg"))
        for row in rows:
            # repr of a python float round-trips exactly; numpy scalars repr
            # as np.float64(...) so coerce first.
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_loss_log(path):
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != ["step", "total", "hm", "bbox", "seg"]:
            raise DecodeError(f"{path}: unexpected loss log header {header}")
        for rec in r:
            rows.append((int(rec[0]), float(rec[1]), float(rec[2]), float(rec[3]), float(rec[4])))
    return rows


# --- train config (INI-style key=value) ----------------------------------------------


def parse_train_config(path):
    """(TrainConfig, ModelConfig) from a sectioned key=value file."""
    import configparser

    from .detection import LossConfig
    from .train import TrainConfig

    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise DataError(f"config file {path} not found or unreadable")

    def section(name):
        return dict(cp[name]) if cp.has_section(name) else {}

    train_kw, model_kw, loss_kw = section("train"), section("model"), section("loss")

    def convert(kw, types, label):
        out = {}
        for key, raw in kw.items():
            if key not in types:
                raise ConfigError(f"unknown {label} config key {key!r}")
            typ = types[key]
            if typ is bool:
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif typ is tuple:
                out[key] = tuple(float(v) for v in raw.split(","))
            else:
                out[key] = typ(raw)
        return out

    train_types = {
        "steps": int, "lr": float, "momentum": float, "seed": int,
        "p_rotation": float, "p_flip": float, "scale_range": tuple,
        "p_point_dropout": float, "p_drop_surfel": float, "p_drop_gaussian": float,
        "augment": bool, "mix_modality": bool, "min_gt_points": int,
    }
    model_types = {
        "d": int, "n_classes": int, "n_bins": int, "head_hidden": int,
        "strategy": str, "voxel_size": float, "bev_range": float,
        "score_threshold": float, "nms_iou": float,
    }
    loss_types = {
        "lambda_hm": float, "lambda_bbox": float, "lambda_seg": float,
        "focal_alpha": float, "focal_beta": float, "seg_gamma": float,
        "smooth_l1_beta": float,
    }
    loss = LossConfig(**convert(loss_kw, loss_types, "loss"))
    train = TrainConfig(loss=loss, **convert(train_kw, train_types, "train"))
    model = ModelConfig(**convert(model_kw, model_types, "model"))
    return train, model
