"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The compiled extension (`mapfuse.kernels._native`, built from Cython) and the
numpy reference implement the same functions with the same accumulation order,
so their outputs are bit-identical. Selection happens once at import:

    MAPFUSE_KERNELS=auto    use the extension if it imported, else numpy (default)
    MAPFUSE_KERNELS=native  require the extension, fail loudly if missing
    MAPFUSE_KERNELS=python  force the numpy fallback

`load_backend()` gives the benchmark direct access to both implementations.
"""
from __future__ import annotations

import os

from ..errors import ConfigError
from . import reference

try:
    from . import _native
except ImportError:
    _native = None

_choice = os.environ.get("MAPFUSE_KERNELS", "auto").strip().lower() or "auto"
if _choice not in ("auto", "native", "python"):
    raise ConfigError(f"MAPFUSE_KERNELS must be auto, native or python, got {_choice!r}")
if _choice == "native" and _native is None:
    raise ConfigError("MAPFUSE_KERNELS=native but the compiled extension is not importable")

_impl = _native if (_native is not None and _choice != "python") else reference

BACKEND = _impl.BACKEND

segment_sum = _impl.segment_sum
segment_count = _impl.segment_count
segment_mean = _impl.segment_mean
segment_max = _impl.segment_max
points_in_any_box = _impl.points_in_any_box
rotated_rect_intersection = _impl.rotated_rect_intersection
rotated_iou_matrix = _impl.rotated_iou_matrix


def backend() -> str:
    """Name of the implementation in use, 'native' or 'python'."""
    return BACKEND


def available_backends():
    names = ["python"]
    if _native is not None:
        names.insert(0, "native")
    return names


def load_backend(name: str):
    """Module implementing the kernel API, for side-by-side comparison."""
    if name == "python":
        return reference
    if name == "native":
        if _native is None:
            raise ConfigError("compiled kernel extension is not importable")
        return _native
    raise ConfigError(f"unknown kernel backend {name!r}")
