"""Backend selection for the geometry hot loops.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``NF_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("NF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

_num_threads = 1


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def _check(table, offsets, lanes: int) -> None:
    # the compiled loops do no bounds checking, so validate the layout here
    if table.ndim != 2 or table.shape[1] != 13:
        raise ValueError(f"primitive table must have shape (N, 13), got {table.shape}")
    if offsets.ndim != 1 or len(offsets) != lanes + 1:
        raise ValueError(f"offsets must have {lanes + 1} entries for {lanes} lanes, got {len(offsets)}")
    if offsets[0] < 0 or offsets[-1] > len(table) or np.any(np.diff(offsets) < 0):
        raise ValueError("offsets must be non-decreasing and within the table")


def _arr(x, dtype=np.float64):
    return np.ascontiguousarray(x, dtype=dtype)


def cast_rays(table, offsets, origins, dirs, backend=None):
    table, offsets, origins, dirs = _arr(table), _arr(offsets, np.int64), _arr(origins), _arr(dirs)
    _check(table, offsets, len(origins))
    if dirs.ndim != 3 or dirs.shape[0] != len(origins) or origins.shape[1:] != (3,):
        raise ValueError("need origins (L, 3) and dirs (L, R, 3)")
    return _pick(backend).cast_rays(table, offsets, origins, dirs, _num_threads)


def render(table, offsets, origins, axes, cam_dirs, backend=None):
    table, offsets, origins, axes = _arr(table), _arr(offsets, np.int64), _arr(origins), _arr(axes)
    cam_dirs = _arr(cam_dirs)
    _check(table, offsets, len(origins))
    if axes.shape != (len(origins), 3, 3) or cam_dirs.ndim != 2 or cam_dirs.shape[1] != 3:
        raise ValueError("need axes (L, 3, 3) and camera directions (P, 3)")
    return _pick(backend).render(table, offsets, origins, axes, cam_dirs, _num_threads)


def closest(table, offsets, points, backend=None):
    table, offsets, points = _arr(table), _arr(offsets, np.int64), _arr(points)
    _check(table, offsets, len(points))
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (L, 3)")
    return _pick(backend).closest(table, offsets, points, _num_threads)


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "compiled":
        from . import _kernels  # type: ignore[attr-defined]

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")
