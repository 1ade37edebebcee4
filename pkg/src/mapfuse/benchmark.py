"""Side-by-side timing of the compiled kernels and the numpy fallback.

Every case runs on each importable backend with identical inputs; besides
wall time the rows record whether the outputs are bitwise equal, which they
must be by construction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .kernels import available_backends, load_backend


@dataclass(frozen=True)
class BenchRow:
    op: str
    size: str
    seconds: dict  # backend name -> best-of-repeats wall time
    identical: bool


def _random_rects(rng, n):
    return np.stack(
        [
            rng.uniform(-20.0, 20.0, n),
            rng.uniform(-20.0, 20.0, n),
            rng.uniform(1.0, 4.0, n),
            rng.uniform(1.0, 4.0, n),
            rng.uniform(-np.pi, np.pi, n),
        ],
        axis=1,
    )


def _cases(seed: int):
    rng = np.random.Generator(np.random.Philox(key=[seed, 190]))
    n, d, segs = 120_000, 8, 15_000
    seg_ids = rng.integers(0, segs, size=n)
    values = rng.normal(size=(n, d))
    yield "segment_sum", f"{n}x{d}", lambda impl: impl.segment_sum(seg_ids, values, segs)
    yield "segment_mean", f"{n}x{d}", lambda impl: impl.segment_mean(seg_ids, values, segs)
    yield "segment_max", f"{n}x{d}", lambda impl: impl.segment_max(seg_ids, values, segs)

    pts = rng.uniform(-40.0, 40.0, size=(60_000, 3))
    boxes = np.stack(
        [
            rng.uniform(-30.0, 30.0, 24),
            rng.uniform(-30.0, 30.0, 24),
            rng.uniform(0.0, 2.0, 24),
            rng.uniform(1.0, 4.0, 24),
            rng.uniform(1.0, 4.0, 24),
            rng.uniform(1.0, 3.0, 24),
            rng.uniform(-np.pi, np.pi, 24),
        ],
        axis=1,
    )
    yield "points_in_any_box", "60000 pts, 24", lambda impl: impl.points_in_any_box(pts, boxes, 0.1)

    ba, bb = _random_rects(rng, 120), _random_rects(rng, 120)
    yield "rotated_iou_matrix", "120x120", lambda impl: impl.rotated_iou_matrix(ba, bb)


def _bitwise_equal(outputs) -> bool:
    first = outputs[0]
    return all(o.shape == first.shape and o.tobytes() == first.tobytes() for o in outputs[1:])


def run_benchmark(repeats: int = 5, seed: int = 0):
    impls = {name: load_backend(name) for name in available_backends()}
    rows = []
    for op, size, call in _cases(seed):
        outs, times = {}, {}
        for name, impl in impls.items():
            outs[name] = call(impl)  # warmup, and the output for the parity column
            best = np.inf
            for _ in range(max(repeats, 1)):
                t0 = time.perf_counter()
                call(impl)
                best = min(best, time.perf_counter() - t0)
            times[name] = best
        rows.append(BenchRow(op, size, times, _bitwise_equal(list(outs.values()))))
    return rows


def format_table(rows) -> str:
    names = [n for n in ("python", "native") if any(n in r.seconds for r in rows)]
    header = f"{'op':20s} {'size':>14s}" + "".join(f"{n + ' ms':>13s}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10s}{'match':>7s}"
    lines = [header]
    for r in rows:
        line = f"{r.op:20s} {r.size:>14s}"
        for n in names:
            line += f"{r.seconds[n] * 1e3:13.3f}" if n in r.seconds else f"{'-':>13s}"
        if len(names) > 1:
            line += f"{r.seconds['python'] / r.seconds['native']:9.2f}x"
            line += f"{'yes' if r.identical else 'NO':>7s}"
        lines.append(line)
    return "\n".join(lines)
