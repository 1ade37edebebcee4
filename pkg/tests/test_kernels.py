"""Segment reductions, box containment, and rotated-overlap kernels.

Every expected value here comes from an independent reimplementation: plain
Python loops for the reductions and containment, a dense rasterization for
the rotated overlap. The compiled backend, when present, must agree with the
numpy fallback to the last bit.
"""
import math

import numpy as np
import pytest

from mapfuse import kernels
from mapfuse.errors import ShapeError
from mapfuse.geom import Box3D, point_in_box

BACKENDS = kernels.available_backends()


def loop_segment_reduce(seg_ids, values, n_segments, mode):
    buckets = [[] for _ in range(n_segments)]
    for sid, row in zip(seg_ids, values):
        buckets[int(sid)].append(row)
    out = np.zeros((n_segments, values.shape[1]))
    for s, rows in enumerate(buckets):
        if not rows:
            if mode == "max":
                out[s] = 0.0
            continue
        stack = np.stack(rows)
        if mode == "sum":
            out[s] = [math.fsum(stack[:, j]) for j in range(stack.shape[1])]
        elif mode == "mean":
            out[s] = [math.fsum(stack[:, j]) / len(rows) for j in range(stack.shape[1])]
        else:
            out[s] = stack.max(axis=0)
    return out


def random_case(seed, n=400, d=6, s=37):
    rng = np.random.default_rng(seed)
    return rng.integers(0, s, size=n), rng.normal(size=(n, d)), s


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("mode", ["sum", "mean", "max"])
def test_segment_reduce_matches_scalar_loop(backend, mode):
    impl = kernels.load_backend(backend)
    fn = getattr(impl, f"segment_{mode}")
    for seed in range(5):
        seg, vals, s = random_case(seed)
        got = fn(seg, vals, s)
        want = loop_segment_reduce(seg, vals, s, mode)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_segment_reduce_permutation_invariant_bitwise(backend):
    impl = kernels.load_backend(backend)
    seg, vals, s = random_case(123, n=900, d=5, s=50)
    rng = np.random.default_rng(7)
    for _ in range(3):
        perm = rng.permutation(seg.size)
        for fn in (impl.segment_sum, impl.segment_mean):
            np.testing.assert_array_equal(fn(seg, vals, s), fn(seg[perm], vals[perm], s))
        np.testing.assert_array_equal(
            impl.segment_max(seg, vals, s), impl.segment_max(seg[perm], vals[perm], s)
        )


@pytest.mark.parametrize("backend", BACKENDS)
def test_segment_count_and_empty_segments(backend):
    impl = kernels.load_backend(backend)
    seg = np.array([0, 0, 3], dtype=np.int64)
    vals = np.array([[1.0], [3.0], [5.0]])
    np.testing.assert_array_equal(impl.segment_count(seg, 5), [2, 0, 0, 1, 0])
    np.testing.assert_array_equal(impl.segment_sum(seg, vals, 5), [[4.0], [0.0], [0.0], [5.0], [0.0]])
    np.testing.assert_array_equal(impl.segment_mean(seg, vals, 5), [[2.0], [0.0], [0.0], [5.0], [0.0]])
    np.testing.assert_array_equal(
        impl.segment_max(seg, vals, 5, empty_fill=-1.0), [[3.0], [-1.0], [-1.0], [5.0], [-1.0]]
    )


@pytest.mark.parametrize("backend", BACKENDS)
def test_segment_reduce_rejects_out_of_range_ids(backend):
    impl = kernels.load_backend(backend)
    vals = np.ones((2, 1))
    with pytest.raises(ShapeError):
        impl.segment_sum(np.array([0, 5]), vals, 3)
    with pytest.raises(ShapeError):
        impl.segment_mean(np.array([-1, 0]), vals, 3)


@pytest.mark.parametrize("backend", BACKENDS)
def test_points_in_any_box_matches_per_point_loop(backend):
    impl = kernels.load_backend(backend)
    rng = np.random.default_rng(31)
    pts = rng.uniform(-4.0, 4.0, size=(300, 3))
    boxes = [
        Box3D(rng.uniform(-2.0, 2.0, size=3), rng.uniform(0.5, 2.5, size=3), rng.uniform(-math.pi, math.pi))
        for _ in range(4)
    ]
    arr = np.stack([b.as_array() for b in boxes])
    for margin in (0.0, 0.15):
        got = impl.points_in_any_box(pts, arr, margin)
        want = np.array([any(point_in_box(p, b, margin) for b in boxes) for p in pts])
        np.testing.assert_array_equal(got, want)


def test_points_in_any_box_empty_inputs():
    assert kernels.points_in_any_box(np.zeros((0, 3)), np.zeros((5, 7))).shape == (0,)
    got = kernels.points_in_any_box(np.zeros((3, 3)), np.zeros((0, 7)))
    np.testing.assert_array_equal(got, [False, False, False])


# --- rotated rectangle overlap ---------------------------------------------------


def raster_iou(a, b, n=700):
    """Monte-carlo-free rasterization oracle on an n x n grid of cell centers."""
    corners = []
    for r in (a, b):
        c, s = math.cos(r[4]), math.sin(r[4])
        lx = np.array([r[2], -r[2], -r[2], r[2]]) / 2.0
        ly = np.array([r[3], r[3], -r[3], -r[3]]) / 2.0
        corners.append(np.stack([lx * c - ly * s + r[0], lx * s + ly * c + r[1]], axis=1))
    allc = np.vstack(corners)
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    gx, gy = np.meshgrid(xs, ys)

    def inside(r):
        dx, dy = gx - r[0], gy - r[1]
        c, s = math.cos(r[4]), math.sin(r[4])
        return (np.abs(c * dx + s * dy) <= r[2] / 2.0) & (np.abs(-s * dx + c * dy) <= r[3] / 2.0)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


@pytest.mark.parametrize("backend", BACKENDS)
class TestRotatedOverlap:
    def test_identical_rectangles_overlap_fully(self, backend):
        impl = kernels.load_backend(backend)
        r = np.array([0.3, -0.2, 2.0, 1.0, 0.7])
        assert impl.rotated_rect_intersection(r, r) == pytest.approx(2.0, abs=1e-12)

    def test_disjoint_rectangles(self, backend):
        impl = kernels.load_backend(backend)
        a = np.array([0.0, 0.0, 1.0, 1.0, 0.2])
        b = np.array([5.0, 5.0, 1.0, 1.0, -0.4])
        assert impl.rotated_rect_intersection(a, b) == 0.0

    def test_half_offset_unit_squares_give_one_seventh_iou(self, backend):
        # Unit squares offset by (0.5, 0.5): intersection 0.25, union 1.75.
        impl = kernels.load_backend(backend)
        a = np.array([0.0, 0.0, 1.0, 1.0, 0.0])
        b = np.array([0.5, 0.5, 1.0, 1.0, 0.0])
        inter = impl.rotated_rect_intersection(a, b)
        assert inter == pytest.approx(0.25, abs=1e-12)
        assert inter / (2.0 - inter) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_against_rasterization(self, backend):
        impl = kernels.load_backend(backend)
        rng = np.random.default_rng(101)
        for _ in range(25):
            a = np.array([*rng.uniform(-1.0, 1.0, size=2), *rng.uniform(1.0, 3.0, size=2), rng.uniform(-math.pi, math.pi)])
            b = np.array([*rng.uniform(-1.0, 1.0, size=2), *rng.uniform(1.0, 3.0, size=2), rng.uniform(-math.pi, math.pi)])
            inter = impl.rotated_rect_intersection(a, b)
            union = a[2] * a[3] + b[2] * b[3] - inter
            assert inter / union == pytest.approx(raster_iou(a, b), abs=3e-3)

    def test_iou_matrix_invariances(self, backend):
        impl = kernels.load_backend(backend)
        rng = np.random.default_rng(41)
        boxes = np.column_stack(
            [rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6), rng.uniform(1, 3, 6), rng.uniform(1, 3, 6), rng.uniform(-math.pi, math.pi, 6)]
        )
        m = impl.rotated_iou_matrix(boxes, boxes)
        np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-12)
        np.testing.assert_allclose(m, m.T, atol=1e-12)

        shifted = boxes.copy()
        shifted[:, :2] += np.array([10.0, -3.0])
        np.testing.assert_allclose(impl.rotated_iou_matrix(shifted, shifted), m, atol=1e-9)

        spun = boxes.copy()
        phi = 0.6
        c, s = math.cos(phi), math.sin(phi)
        spun[:, 0] = boxes[:, 0] * c - boxes[:, 1] * s
        spun[:, 1] = boxes[:, 0] * s + boxes[:, 1] * c
        spun[:, 4] = boxes[:, 4] + phi
        np.testing.assert_allclose(impl.rotated_iou_matrix(spun, spun), m, atol=1e-9)

    def test_shape_validation(self, backend):
        impl = kernels.load_backend(backend)
        with pytest.raises(ShapeError):
            impl.rotated_iou_matrix(np.zeros((2, 4)), np.zeros((2, 5)))


# --- backend parity ----------------------------------------------------------------


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree_bitwise():
    native = kernels.load_backend("native")
    python = kernels.load_backend("python")
    rng = np.random.default_rng(77)

    seg = rng.integers(0, 40, size=1000)
    vals = rng.normal(size=(1000, 8))
    for name in ("segment_sum", "segment_mean", "segment_max"):
        np.testing.assert_array_equal(getattr(native, name)(seg, vals, 40), getattr(python, name)(seg, vals, 40))
    np.testing.assert_array_equal(native.segment_count(seg, 40), python.segment_count(seg, 40))

    pts = rng.uniform(-5, 5, size=(500, 3))
    boxes = np.column_stack(
        [rng.uniform(-3, 3, (8, 3)), rng.uniform(0.5, 3.0, (8, 3)), rng.uniform(-math.pi, math.pi, (8, 1))]
    )
    np.testing.assert_array_equal(native.points_in_any_box(pts, boxes, 0.1), python.points_in_any_box(pts, boxes, 0.1))

    rects = np.column_stack(
        [rng.uniform(-2, 2, (30, 2)), rng.uniform(0.5, 4.0, (30, 2)), rng.uniform(-math.pi, math.pi, (30, 1))]
    )
    for i in range(0, 30, 7):
        assert native.rotated_rect_intersection(rects[i], rects[(i + 1) % 30]) == python.rotated_rect_intersection(
            rects[i], rects[(i + 1) % 30]
        )
    np.testing.assert_array_equal(native.rotated_iou_matrix(rects, rects), python.rotated_iou_matrix(rects, rects))


def test_active_backend_is_reported():
    assert kernels.backend() in ("native", "python")
    assert "python" in BACKENDS
