"""Command-line front end: synthesis, map building, training, inference, eval.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import kernels
from .checks import GRAD_TOLERANCE, gradient_check_suite
from .detection import GroundTruth, evaluate_ap
from .errors import DataError, MapfuseError, NumericError
from .formats import (
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
from .gaussians import init_gaussians_from_lidar
from .geom import PointCloud
from .model import ModelConfig, ModelInputs, detection_to_dict
from .surfels import build_surfels_tiled, remove_dynamic_points
from .synth import generate_scene, scan_traversals, simulate_lidar_scan
from .train import (
    TrainConfig,
    benchmark_scene_spec,
    make_dataset,
    make_sequence,
    train_toy,
    two_pass_inference,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_clouds(paths) -> PointCloud:
    clouds = [read_pointcloud(p) for p in paths]
    return clouds[0] if len(clouds) == 1 else PointCloud.concatenate(clouds)


def _read_box_file(path):
    return [g.box for frame in read_ground_truth(path) for g in frame]


def _bbox_line(arr) -> str:
    if arr.shape[0] == 0:
        return "empty"
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    return " ".join(f"{n} [{a:.2f}, {b:.2f}]" for n, a, b in zip("xyz", lo, hi))


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_scene(benchmark_scene_spec(args.seed, i))
        stem = out / f"scene{i:03d}"
        write_pointcloud(f"{stem}_scan.mppc", simulate_lidar_scan(scene, frame=args.frame))
        write_pointcloud(f"{stem}_map.mppc", scan_traversals(scene, frame=args.frame))
        write_ground_truth(f"{stem}_gt.jsonl", scene.gt_boxes(args.frame))
        write_ground_truth(f"{stem}_boxes.jsonl", [GroundTruth(b) for b in scene.all_dynamic_boxes()])
    print(f"wrote {args.scenes} scene(s) under {out}")
    return 0


def cmd_build_surfel(args) -> int:
    pc = _read_clouds(args.clouds)
    if args.boxes:
        pc = remove_dynamic_points(pc, _read_box_file(args.boxes), args.margin)
    m, report = build_surfels_tiled(
        pc,
        voxel_size=args.voxel_size,
        tile_size=args.tile_size,
        min_support=args.min_support,
        jobs=args.jobs,
    )
    write_surfelmap(args.out, m)
    print(
        f"{len(m)} surfels from {report.voxels_seen} voxels "
        f"(skipped {report.skipped_low_support} low-support, "
        f"{report.skipped_degenerate} degenerate) -> {args.out}"
    )
    return 0


def cmd_build_gaussian(args) -> int:
    pc = _read_clouds(args.clouds)
    if args.boxes:
        pc = remove_dynamic_points(pc, _read_box_file(args.boxes), args.margin)
    m = init_gaussians_from_lidar(pc, voxel_size=args.voxel_size, min_support=args.min_support)
    write_gaussianmap(args.out, m)
    print(f"{len(m)} gaussians -> {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        train_cfg, model_cfg = parse_train_config(args.config)
    else:
        train_cfg, model_cfg = TrainConfig(), ModelConfig()
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    samples = make_dataset(args.data_seed, args.scenes, model_cfg, with_priors=not args.no_priors)
    detector, log = train_toy(samples, train_cfg, model_cfg)
    write_model(args.out, detector)
    if args.log:
        write_loss_log(args.log, log)
    print(f"{train_cfg.steps} steps on {len(samples)} scenes, final loss {log[-1][1]:.4f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    detector = read_model(args.model)
    inputs = ModelInputs(
        read_pointcloud(args.cloud),
        read_surfelmap(args.with_surfel) if args.with_surfel else None,
        read_gaussianmap(args.with_gaussian) if args.with_gaussian else None,
        None,
    )
    dets = detector.predict(inputs, score_threshold=args.score_threshold)
    if args.out:
        write_detections(args.out, dets)
        print(f"{len(dets)} detection(s) -> {args.out}")
    else:
        for d in dets:
            print(json.dumps(detection_to_dict(d)))
    return 0


def cmd_two_pass(args) -> int:
    detector = read_model(args.model)
    sequence = make_sequence(args.seed, detector.config)
    result = two_pass_inference(
        sequence, detector, margin=args.margin, map_voxel=args.map_voxel, score_threshold=args.score_threshold
    )
    gt_frames = [list(s.gts) for s in sequence]
    r1 = evaluate_ap(list(result.pass1), gt_frames, iou_threshold=args.iou, use_3d=False)
    r2 = evaluate_ap(list(result.pass2), gt_frames, iou_threshold=args.iou, use_3d=False)
    print(f"pass 1 AP@{args.iou:g} {r1.ap:.4f}  pass 2 AP@{args.iou:g} {r2.ap:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_detections(out / "pass1.jsonl", [list(f) for f in result.pass1])
        write_detections(out / "pass2.jsonl", [list(f) for f in result.pass2])
        write_surfelmap(out / "map.mpsf", result.surfel)
        write_gaussianmap(out / "map.mpgs", result.gaussian)
        print(f"detections and maps -> {out}")
    return 0


def cmd_eval(args) -> int:
    dets = read_detections(args.dets)
    gts = read_ground_truth(args.gt)
    frames = max(len(dets), len(gts), 1)
    dets += [[] for _ in range(frames - len(dets))]
    gts += [[] for _ in range(frames - len(gts))]
    result = evaluate_ap(dets, gts, iou_threshold=args.iou, use_3d=not args.bev)
    kind = "BEV" if args.bev else "3D"
    print(f"{kind} AP@{args.iou:g} {result.ap:.4f}  APH {result.aph:.4f}")
    for cid in sorted(result.per_class):
        ap, aph = result.per_class[cid]
        print(f"  class {cid}: AP {ap:.4f}  APH {aph:.4f}")
    return 0


def cmd_check_grad(args) -> int:
    rows = gradient_check_suite(seed=args.seed, h=args.step)
    for name, err in rows:
        print(f"{name:24s} {err:.3e}")
    worst = max(err for _, err in rows)
    print(f"max rel err {worst:.3e} over {len(rows)} configurations")
    if worst > GRAD_TOLERANCE:
        raise NumericError(f"max rel err {worst:.3e} exceeds {GRAD_TOLERANCE:g}")
    return 0


def cmd_inspect(args) -> int:
    path = args.file
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
    except IsADirectoryError as e:
        raise DataError(f"{path}: is a directory") from e
    if magic == b"MPPC":
        pc = read_pointcloud(path)
        n_trav = len(set(pc.traversal.tolist())) if len(pc) else 0
        print(f"point cloud: {len(pc)} points, {n_trav} traversal(s), {_bbox_line(pc.xyz)}")
    elif magic == b"MPSF":
        m = read_surfelmap(path)
        print(f"surfel map: {len(m)} surfels, voxel {m.voxel_size:g} m, {_bbox_line(m.positions)}")
    elif magic == b"MPGS":
        m = read_gaussianmap(path)
        print(f"gaussian map: {len(m)} gaussians, {_bbox_line(m.mu)}")
    elif magic == b"MPWT":
        detector = read_model(path)
        cfg = detector.config
        print(
            f"model: strategy {cfg.strategy}, d {cfg.d}, {cfg.n_classes} class(es), "
            f"{cfg.n_bins} heading bins, {len(detector.tensor_names())} tensors, "
            f"{detector.num_params()} parameters"
        )
    elif path.endswith(".jsonl"):
        frames = read_detections(path)
        total = sum(len(f) for f in frames)
        print(f"detections: {total} over {len(frames)} frame(s)")
    elif path.endswith(".csv"):
        rows = read_loss_log(path)
        if rows:
            print(f"loss log: {len(rows)} steps, final total {rows[-1][1]:.4f}")
        else:
            print("loss log: empty")
    else:
        raise DataError(f"{path}: unrecognized file (magic {magic!r})")
    return 0


def cmd_bench(args) -> int:
    from .benchmark import format_table, run_benchmark

    print(f"active kernel backend: {kernels.backend()}")
    rows = run_benchmark(repeats=args.repeats, seed=args.seed)
    print(format_table(rows))
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="mapfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes (scans, map clouds, ground truth)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-surfel", help="build a surfel map from point cloud files")
    s.add_argument("clouds", nargs="+")
    s.add_argument("--boxes", help="ground-truth boxes (jsonl) to carve out before mapping")
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=float, default=0.25)
    s.add_argument("--tile-size", type=float, default=8.0)
    s.add_argument("--margin", type=float, default=0.1)
    s.add_argument("--min-support", type=int, default=3)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_build_surfel)

    s = sub.add_parser("build-gaussian", help="build a gaussian map from point cloud files")
    s.add_argument("clouds", nargs="+")
    s.add_argument("--boxes")
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=float, default=0.25)
    s.add_argument("--margin", type=float, default=0.1)
    s.add_argument("--min-support", type=int, default=3)
    s.set_defaults(func=cmd_build_gaussian)

    s = sub.add_parser("train", help="train the toy detector on synthetic scenes")
    s.add_argument("--config", help="sectioned key=value file ([train]/[model]/[loss])")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="write per-step losses to this CSV file")
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--no-priors", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run detection on one point cloud")
    s.add_argument("--model", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--with-surfel", metavar="MPSF")
    s.add_argument("--with-gaussian", metavar="MPGS")
    s.add_argument("--out", help="write detections here instead of stdout")
    s.add_argument("--score-threshold", type=float)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("two-pass", help="detect, build maps from pass 1, detect again with priors")
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--margin", type=float, default=0.1)
    s.add_argument("--map-voxel", type=float, default=0.5)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--score-threshold", type=float)
    s.add_argument("--out", help="directory for per-pass detections and maps")
    s.set_defaults(func=cmd_two_pass)

    s = sub.add_parser("eval", help="AP/APH of a detection file against ground truth")
    s.add_argument("--dets", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=float, default=0.7)
    s.add_argument("--bev", action="store_true", help="match in BEV instead of 3D IoU")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-grad", help="finite-difference check of every backward pass")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-5, help="central-difference step size")
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("inspect", help="summarize a data file (format chosen by magic)")
    s.add_argument("file")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("bench", help="time compiled kernels against the numpy fallback")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except MapfuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
