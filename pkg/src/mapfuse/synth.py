"""Deterministic synthetic desk-scale world for exercising the pipeline.

A scene is a flat ground plane, perimeter walls, vehicle-colored static
clutter (hard negatives that only the map priors can tell apart from
vehicles), and parked plus constant-velocity moving vehicles. Lidar scans
sample primitive surfaces with density falling off as 1/range^2; there is
no ray casting, occlusion is approximated by an optional per-primitive
visibility predicate.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .detection import GroundTruth
from .errors import ConfigError, DataError
from .geom import Box3D, PointCloud
from .kernels import rotated_iou_matrix
from .voxels import BevFeatureGrid, BevGridConfig, encode_keys_2d

GROUND_COLOR = np.array([0.35, 0.40, 0.35])
WALL_COLOR = np.array([0.55, 0.53, 0.50])
# Vehicles and clutter draw from the same palette on purpose.
PALETTE = np.array(
    [
        [0.10, 0.12, 0.35],
        [0.45, 0.08, 0.08],
        [0.85, 0.85, 0.88],
        [0.12, 0.30, 0.15],
        [0.30, 0.30, 0.32],
    ]
)
VEHICLE_DIMS = np.array([2.6, 2.2, 1.6])
_MASK64 = (1 << 64) - 1


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, zlib.crc32(tag.encode())]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 8.0  # scene spans [-extent, extent] in x and y
    walls: bool = True
    n_clutter: int = 4
    n_parked: int = 2
    n_moving: int = 1
    n_frames: int = 5
    dt: float = 0.5
    traversals: int = 3
    points_per_scan: int = 900
    noise_sigma: float = 0.005
    speed_range: tuple = (0.8, 2.0)
    # Explicit static boxes appended verbatim: (center(3), dims(3), yaw, rgb(3)).
    extra_static: tuple = ()

    def __post_init__(self):
        if not (0.0 < self.extent <= 75.0):
            raise ConfigError("scene extent must lie in (0, 75] meters")
        if min(self.n_clutter, self.n_parked, self.n_moving, self.points_per_scan) < 0:
            raise ConfigError("counts must be non-negative")
        if self.n_frames < 1 or self.traversals < 1:
            raise ConfigError("need at least one frame and one traversal")
        if self.dt <= 0.0 or self.noise_sigma < 0.0:
            raise ConfigError("dt must be positive and noise non-negative")


@dataclass(frozen=True)
class ScenePrimitive:
    box: Box3D
    color: np.ndarray
    kind: str  # "wall" | "clutter"


@dataclass(frozen=True)
class SceneObject:
    """A ground-truth vehicle; parked objects have zero velocity."""

    box0: Box3D
    velocity: np.ndarray  # (2,) m/s
    color: np.ndarray

    def box_at(self, frame: int, dt: float) -> Box3D:
        shift = self.velocity * (frame * dt)
        center = self.box0.center + np.array([shift[0], shift[1], 0.0])
        return Box3D(center, self.box0.dims, self.box0.yaw)

    @property
    def moving(self) -> bool:
        return bool(np.any(self.velocity != 0.0))


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    statics: tuple  # ScenePrimitive
    objects: tuple  # SceneObject

    def gt_boxes(self, frame: int):
        return [GroundTruth(o.box_at(frame, self.spec.dt), 0) for o in self.objects]

    def all_dynamic_boxes(self):
        """Object boxes across every frame, for map cleanup."""
        out = []
        for f in range(self.spec.n_frames):
            out.extend(g.box for g in self.gt_boxes(f))
        return out

    def ego_xy(self, traversal: int) -> np.ndarray:
        """Slightly different viewpoint per traversal, near the origin."""
        r = _rng(self.spec.seed, f"ego-{traversal}")
        return r.uniform(-0.15, 0.15, size=2) * self.spec.extent


def _bev_rows(boxes) -> np.ndarray:
    return np.array([[b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw] for b in boxes]).reshape(-1, 5)


def _wall_primitives(extent: float):
    t, h = 0.3, 2.0
    span = 2.0 * extent
    # Side walls are shortened so the corners stay overlap-free.
    walls = [
        Box3D(np.array([0.0, extent, h / 2]), np.array([span, t, h]), 0.0),
        Box3D(np.array([0.0, -extent, h / 2]), np.array([span, t, h]), 0.0),
        Box3D(np.array([extent, 0.0, h / 2]), np.array([t, span - 2.0 * t, h]), 0.0),
        Box3D(np.array([-extent, 0.0, h / 2]), np.array([t, span - 2.0 * t, h]), 0.0),
    ]
    return [ScenePrimitive(b, WALL_COLOR, "wall") for b in walls]


def _place_box(rng, extent: float, dims: np.ndarray, placed, attempts: int = 200) -> Box3D:
    """Rejection-sample a pose that stays inside and clears existing boxes."""
    margin = max(dims[0], dims[1])
    lim = extent - margin
    if lim <= 0.0:
        raise DataError("scene extent too small for the requested objects")
    existing = _bev_rows(placed)
    for _ in range(attempts):
        center = np.array([rng.uniform(-lim, lim), rng.uniform(-lim, lim), dims[2] / 2.0])
        yaw = rng.uniform(-math.pi, math.pi)
        cand = Box3D(center, dims, yaw)
        if existing.shape[0] == 0:
            return cand
        iou = rotated_iou_matrix(_bev_rows([cand]), existing)
        if float(iou.max()) < 1e-9:
            return cand
    raise DataError("could not place scene objects without overlap")


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene; overlapping primitives are a data error."""
    rng = _rng(spec.seed, "scene")
    statics = list(_wall_primitives(spec.extent)) if spec.walls else []

    placed = [p.box for p in statics]
    for i in range(spec.n_clutter):
        dims = VEHICLE_DIMS * rng.uniform(0.85, 1.15, size=3)
        box = _place_box(rng, spec.extent, dims, placed)
        statics.append(ScenePrimitive(box, PALETTE[int(rng.integers(len(PALETTE)))], "clutter"))
        placed.append(box)
    for center, dims, yaw, color in spec.extra_static:
        box = Box3D(np.asarray(center, dtype=np.float64), np.asarray(dims, dtype=np.float64), float(yaw))
        statics.append(ScenePrimitive(box, np.asarray(color, dtype=np.float64), "clutter"))
        placed.append(box)

    objects = []
    for i in range(spec.n_parked):
        dims = VEHICLE_DIMS * rng.uniform(0.9, 1.1, size=3)
        box = _place_box(rng, spec.extent, dims, placed)
        objects.append(SceneObject(box, np.zeros(2), PALETTE[int(rng.integers(len(PALETTE)))]))
        placed.append(box)
    horizon = (spec.n_frames - 1) * spec.dt
    for i in range(spec.n_moving):
        dims = VEHICLE_DIMS * rng.uniform(0.9, 1.1, size=3)
        for _ in range(200):
            box = _place_box(rng, spec.extent, dims, placed)
            speed = rng.uniform(*spec.speed_range)
            heading = box.yaw  # moving vehicles travel nose-first
            vel = speed * np.array([math.cos(heading), math.sin(heading)])
            end = box.center[:2] + vel * horizon
            lim = spec.extent - max(dims[0], dims[1])
            if np.all(np.abs(end) <= lim):
                objects.append(SceneObject(box, vel, PALETTE[int(rng.integers(len(PALETTE)))]))
                placed.append(box)
                break
        else:
            raise DataError("could not fit a moving object trajectory inside the scene")

    rows = _bev_rows(placed)
    if rows.shape[0] > 1:
        iou = rotated_iou_matrix(rows, rows)
        np.fill_diagonal(iou, 0.0)
        if float(iou.max()) >= 1e-9:
            raise DataError("scene primitives overlap")
    return Scene(spec, tuple(statics), tuple(objects))


# --- lidar simulation --------------------------------------------------------


def _box_surface(rng, box: Box3D, n: int) -> np.ndarray:
    """n points uniform over the four side faces and the top."""
    if n <= 0:
        return np.zeros((0, 3))
    l, w, h = box.dims
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    for idx, (lu, lv) in enumerate(((0, 2), (0, 2), (1, 2), (1, 2), (0, 1))):
        sel = face == idx
        pts = np.zeros((int(sel.sum()), 3))
        pts[:, lu] = u[sel] * box.dims[lu]
        pts[:, lv] = v[sel] * box.dims[lv]
        if idx < 4:  # side faces sit at +-w/2 or +-l/2
            axis = 1 if idx < 2 else 0
            sign = 1.0 if idx % 2 == 0 else -1.0
            pts[:, axis] = sign * box.dims[axis] / 2.0
        else:
            pts[:, 2] = box.dims[2] / 2.0
        local[sel] = pts
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = local[:, 0] * c - local[:, 1] * s + box.center[0]
    world[:, 1] = local[:, 0] * s + local[:, 1] * c + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def _luminance(color: np.ndarray) -> float:
    return float(0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2])


def simulate_lidar_scan(
    scene: Scene,
    ego_xy=(0.0, 0.0),
    frame: int = 0,
    traversal: int = 0,
    visible_fn=None,
    sweep: int = 0,
) -> PointCloud:
    """One scan: surface samples with density proportional to 1/range^2.

    `sweep` selects an independent sample stream for repeated scans of the
    same pose, the way parked platforms accumulate density over time.
    """
    spec = scene.spec
    ego = np.asarray(ego_xy, dtype=np.float64)
    tag = f"scan-{traversal}-{frame}" if sweep == 0 else f"scan-{traversal}-{frame}-{sweep}"
    rng = _rng(spec.seed, tag)

    surfaces = []  # (box or None for ground, color, weight)
    if visible_fn is None:
        visible_fn = lambda center, e: True

    if visible_fn(np.zeros(3), ego):
        # Ground sampled in polar form around the ego; pdf(r) ~ 1/r gives
        # the same 1/r^2 areal density as the box allocation below.
        surfaces.append((None, GROUND_COLOR, 2.0))

    frame_boxes = [(p.box, p.color) for p in scene.statics]
    frame_boxes += [(o.box_at(frame, spec.dt), o.color) for o in scene.objects]
    for box, color in frame_boxes:
        if not visible_fn(box.center, ego):
            continue
        l, w, h = box.dims
        area = 2 * l * h + 2 * w * h + l * w
        r = max(float(np.linalg.norm(box.center[:2] - ego)), 1.0)
        surfaces.append((box, color, area / (r * r)))

    if not surfaces or spec.points_per_scan == 0:
        return PointCloud.empty()

    weights = np.array([s[2] for s in surfaces])
    counts = np.floor(spec.points_per_scan * weights / weights.sum()).astype(int)
    xyz_parts, rgb_parts, int_parts = [], [], []
    for (box, color, _), n in zip(surfaces, counts):
        if n <= 0:
            continue
        if box is None:
            r_min, r_max = 0.5, spec.extent * math.sqrt(2.0)
            r = r_min * (r_max / r_min) ** rng.uniform(0.0, 1.0, size=n)
            theta = rng.uniform(-math.pi, math.pi, size=n)
            pts = np.stack([ego[0] + r * np.cos(theta), ego[1] + r * np.sin(theta), np.zeros(n)], axis=1)
            keep = (np.abs(pts[:, 0]) <= spec.extent) & (np.abs(pts[:, 1]) <= spec.extent)
            pts = pts[keep]
        else:
            pts = _box_surface(rng, box, int(n))
        if spec.noise_sigma > 0.0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        xyz_parts.append(pts)
        rgb_parts.append(np.tile(color, (pts.shape[0], 1)))
        int_parts.append(np.full(pts.shape[0], _luminance(color)))

    if not xyz_parts:
        return PointCloud.empty()
    xyz = np.concatenate(xyz_parts)
    rgb = np.concatenate(rgb_parts)
    inten = np.concatenate(int_parts)
    trav = np.full(xyz.shape[0], traversal, dtype=np.int32)
    return PointCloud(xyz, rgb, inten, trav)


def scan_traversals(scene: Scene, frame: int = 0, sweeps: int = 5) -> PointCloud:
    """Accumulated map cloud: `sweeps` scans from each traversal pose.

    Single scans are too thin to support surfel estimation at 0.25 m;
    accumulation is what makes the maps maps.
    """
    scans = [
        simulate_lidar_scan(scene, scene.ego_xy(t), frame=frame, traversal=t, sweep=k)
        for t in range(scene.spec.traversals)
        for k in range(sweeps)
    ]
    return PointCloud.concatenate(scans)


# --- camera stub -------------------------------------------------------------

CAMERA_RAW_DIM = 5  # r, g, b, occupancy, top height


def synth_camera_bev(scene: Scene, config: BevGridConfig, d: int, seed: int = None) -> BevFeatureGrid:
    """Rasterized static color/occupancy, projected to d dims by a fixed map.

    Only static primitives contribute; vehicles are invisible to the stub,
    which keeps it a prior-like channel rather than a detection oracle.
    """
    if seed is None:
        seed = scene.spec.seed
    raw = {}
    vs = config.voxel_size
    for prim in scene.statics:
        b = prim.box
        half_diag = math.hypot(b.dims[0], b.dims[1]) / 2.0
        lo = np.floor((b.center[:2] - half_diag) / vs).astype(np.int64)
        hi = np.floor((b.center[:2] + half_diag) / vs).astype(np.int64)
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                px = (ix + 0.5) * vs - b.center[0]
                py = (iy + 0.5) * vs - b.center[1]
                bx = c * px + s * py
                by = -s * px + c * py
                if abs(bx) <= b.dims[0] / 2.0 and abs(by) <= b.dims[1] / 2.0:
                    top = b.center[2] + b.dims[2] / 2.0
                    rec = raw.get((ix, iy))
                    if rec is None or top > rec[4]:
                        raw[(ix, iy)] = [prim.color[0], prim.color[1], prim.color[2], 1.0, top]
    if not raw:
        return BevFeatureGrid.empty(d, config)
    keys = np.array(sorted(raw.keys()), dtype=np.int64)
    order = np.argsort(encode_keys_2d(keys), kind="stable")
    keys = keys[order]
    feats = np.array([raw[(int(k[0]), int(k[1]))] for k in keys])
    proj = _rng(seed, "camera_stub").normal(0.0, 1.0 / math.sqrt(CAMERA_RAW_DIM), size=(CAMERA_RAW_DIM, d))
    return BevFeatureGrid(keys, feats @ proj, config)
