"""Pinhole depth rendering of analytic scenes and network-input preprocessing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import World, pack, sphere_rows


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 64
    height: int = 48
    hfov: float = math.radians(87.0)
    vfov: float = math.radians(58.0)
    min_depth: float = 0.3
    max_depth: float = 10.0
    pool: int = 4

    def __post_init__(self):
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise ValueError("fields of view must lie in (0, pi)")
        if not (0 < self.min_depth < self.max_depth):
            raise ValueError("need 0 < min_depth < max_depth")
        if self.width % self.pool or self.height % self.pool:
            raise ValueError("image size must be divisible by the pooling factor")

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.height // self.pool, self.width // self.pool


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative Gaussian depth noise plus random dropout to max depth."""

    sigma: float = 0.02
    dropout: float = 0.005


@lru_cache(maxsize=16)
def _pixel_dirs(cam: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions in (forward, left, up) camera components, row-major (H*W, 3)."""
    xs = ((np.arange(cam.width) + 0.5) / cam.width) * 2.0 - 1.0
    ys = ((np.arange(cam.height) + 0.5) / cam.height) * 2.0 - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    d = np.stack([np.ones_like(xx),
                  -xx * math.tan(0.5 * cam.hfov),
                  -yy * math.tan(0.5 * cam.vfov)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


def pixel_directions(cam: CameraIntrinsics) -> np.ndarray:
    return _pixel_dirs(cam)


def lane_tables(world_tables: list[np.ndarray], extra: list[np.ndarray] | None = None):
    """Concatenate per-lane primitive tables into (table, offsets) for the kernels."""
    parts = []
    for i, t in enumerate(world_tables):
        parts.append(t)
        if extra is not None and len(extra[i]):
            parts.append(extra[i])
    sizes = [len(t) + (len(extra[i]) if extra is not None else 0) for i, t in enumerate(world_tables)]
    offsets = np.zeros(len(world_tables) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    table = np.ascontiguousarray(np.concatenate(parts)) if parts else np.zeros((0, 13))
    return table, offsets


def render_batch(table: np.ndarray, offsets: np.ndarray, positions: np.ndarray, axes: np.ndarray,
                 cam: CameraIntrinsics) -> np.ndarray:
    """Clamped z-depth images (L, H, W) for L lanes; no-hit reads as max depth."""
    z = kernels.render(table, offsets, np.ascontiguousarray(positions, dtype=np.float64),
                       np.ascontiguousarray(axes, dtype=np.float64), _pixel_dirs(cam))
    z = np.clip(np.where(np.isfinite(z), z, cam.max_depth), cam.min_depth, cam.max_depth)
    return z.reshape(len(positions), cam.height, cam.width)


def render_depth(world: World, other_agents, position, attitude, cam: CameraIntrinsics = CameraIntrinsics()):
    """Depth image (H, W) seen from ``position`` with body ``attitude``.

    ``other_agents`` is a list of (center, radius) spheres, excluding the observer.
    """
    extra = [sphere_rows(np.asarray(c), r) for c, r in other_agents]
    rows = [pack(world.primitives)] + extra
    table = np.ascontiguousarray(np.concatenate(rows)) if rows else np.zeros((0, 13))
    offsets = np.array([0, len(table)], dtype=np.int64)
    return render_batch(table, offsets, np.asarray(position, dtype=float).reshape(1, 3),
                        attitude.axes().reshape(1, 3, 3), cam)[0]


def add_noise(depth: np.ndarray, noise: NoiseModel, rng: np.random.Generator, cam: CameraIntrinsics):
    out = depth * (1.0 + noise.sigma * rng.standard_normal(depth.shape))
    drop = rng.random(depth.shape) < noise.dropout
    return np.where(drop, cam.max_depth, out)


def preprocess(depth: np.ndarray, cam: CameraIntrinsics = CameraIntrinsics(), noise: NoiseModel | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse depth min_depth/clamp(d) in (0, 1], max-pooled by ``cam.pool``.

    Accepts (H, W) or (..., H, W); returns (..., H/pool, W/pool).
    """
    if noise is not None:
        if rng is None:
            raise ValueError("noise requires an rng")
        depth = add_noise(depth, noise, rng, cam)
    inv = cam.min_depth / np.clip(depth, cam.min_depth, cam.max_depth)
    k = cam.pool
    *lead, h, w = inv.shape
    return inv.reshape(*lead, h // k, k, w // k, k).max(axis=(-3, -1))


def write_pgm(path, img: np.ndarray, lo: float, hi: float) -> None:
    """Binary 8-bit PGM; ``lo`` maps to black and ``hi`` to white."""
    a = np.clip((np.asarray(img, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    data = np.round(a * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
