"""Analytic obstacle primitives, random scene generation and geometric queries."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import kernels

PLANE, CUBOID, SPHERE, CYLINDER = 0, 1, 2, 3
TABLE_COLS = 13
SCENE_FORMAT = "newtonfly-scene"
SCENE_VERSION = 1


class GeometryError(ValueError):
    pass


def _vec3(x) -> tuple[float, float, float]:
    a = tuple(float(v) for v in x)
    if len(a) != 3:
        raise GeometryError(f"expected a 3-vector, got {x!r}")
    return a  # type: ignore[return-value]


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    kind = "plane"

    def __post_init__(self):
        object.__setattr__(self, "point", _vec3(self.point))
        object.__setattr__(self, "normal", _vec3(self.normal))
        if abs(math.sqrt(sum(c * c for c in self.normal)) - 1.0) > 1e-9:
            raise GeometryError("plane normal must have unit length")

    def row(self) -> np.ndarray:
        r = np.zeros(TABLE_COLS)
        r[0] = PLANE
        r[1:4] = self.point
        r[4:7] = self.normal
        r[12] = np.inf
        return r


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0
    kind = "cuboid"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents))
        object.__setattr__(self, "yaw", float(self.yaw))
        if min(self.half_extents) <= 0:
            raise GeometryError("cuboid half-extents must be positive")

    def row(self) -> np.ndarray:
        r = np.zeros(TABLE_COLS)
        r[0] = CUBOID
        r[1:4] = self.center
        r[4:7] = self.half_extents
        r[7] = math.cos(self.yaw)
        r[8] = math.sin(self.yaw)
        r[9:12] = self.center
        r[12] = math.sqrt(sum(h * h for h in self.half_extents)) * (1 + 1e-9)
        return r


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    kind = "sphere"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if self.radius <= 0:
            raise GeometryError("sphere radius must be positive")

    def row(self) -> np.ndarray:
        r = np.zeros(TABLE_COLS)
        r[0] = SPHERE
        r[1:4] = self.center
        r[4] = self.radius
        r[9:12] = self.center
        r[12] = self.radius * (1 + 1e-9)
        return r


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder standing on ``base`` (center of the bottom disc)."""

    base: tuple[float, float, float]
    radius: float
    height: float
    kind = "cylinder"

    def __post_init__(self):
        object.__setattr__(self, "base", _vec3(self.base))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "height", float(self.height))
        if self.radius <= 0 or self.height <= 0:
            raise GeometryError("cylinder radius and height must be positive")

    def row(self) -> np.ndarray:
        r = np.zeros(TABLE_COLS)
        r[0] = CYLINDER
        r[1:4] = self.base
        r[4] = self.radius
        r[5] = self.height
        r[9:12] = (self.base[0], self.base[1], self.base[2] + 0.5 * self.height)
        r[12] = math.hypot(self.radius, 0.5 * self.height) * (1 + 1e-9)
        return r


Primitive = Union[Plane, Cuboid, Sphere, Cylinder]
_KINDS = {"plane": Plane, "cuboid": Cuboid, "sphere": Sphere, "cylinder": Cylinder}


def ground_plane() -> Plane:
    return Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class World:
    primitives: tuple
    arena_lo: tuple[float, float, float]
    arena_hi: tuple[float, float, float]
    start: tuple[float, float, float]
    goal: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        for name in ("arena_lo", "arena_hi", "start", "goal"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))

    def table(self) -> np.ndarray:
        return pack(self.primitives)

    def check(self, clearance: float = 1.0) -> None:
        """Raise GeometryError if start/goal are outside the arena or too close to an obstacle."""
        lo, hi = np.array(self.arena_lo), np.array(self.arena_hi)
        for name in ("start", "goal"):
            p = np.array(getattr(self, name))
            if np.any(p < lo) or np.any(p > hi):
                raise GeometryError(f"{name} {p} outside arena")
            if self.primitives:
                d, _, i = _closest_table(self.table(), p)
                if d < clearance:
                    raise GeometryError(f"{name} is {d:.3f} m from primitive {i} (< {clearance})")


def pack(primitives) -> np.ndarray:
    if not primitives:
        return np.zeros((0, TABLE_COLS))
    return np.ascontiguousarray(np.stack([p.row() for p in primitives]))


def sphere_rows(centers: np.ndarray, radius: float) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    rows = np.zeros((len(centers), TABLE_COLS))
    rows[:, 0] = SPHERE
    rows[:, 1:4] = centers
    rows[:, 4] = radius
    rows[:, 9:12] = centers
    rows[:, 12] = radius * (1 + 1e-9)
    return rows


def _closest_table(table: np.ndarray, p: np.ndarray):
    offsets = np.array([0, len(table)], dtype=np.int64)
    d, q, i = kernels.closest(np.ascontiguousarray(table), offsets,
                              np.ascontiguousarray(np.asarray(p, dtype=np.float64).reshape(1, 3)))
    return float(d[0]), q[0], int(i[0])


@dataclass(frozen=True)
class ClosestPoint:
    distance: float
    direction: np.ndarray
    point: np.ndarray
    index: int


def direction_to(q: np.ndarray, p: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Unit vectors from p toward q; rows with zero separation get (0, 0, -1)."""
    diff = np.asarray(q, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    n = np.linalg.norm(diff, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.array([0.0, 0.0, -1.0]), diff.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(n > 1e-12, diff / np.where(n > 1e-12, n, 1.0), fallback)
    return out


def closest_point(world: World, p) -> ClosestPoint:
    if not world.primitives:
        raise GeometryError("no obstacles")
    p = np.asarray(p, dtype=np.float64)
    d, q, i = _closest_table(world.table(), p)
    return ClosestPoint(d, direction_to(q, p, np.array([d])), q, i)


def ray_cast(world: World, origin, direction) -> float | None:
    """Depth of the first surface hit along a unit ray, or None."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise GeometryError("ray direction must be unit length")
    table = world.table()
    if len(table) == 0:
        return None
    t = kernels.cast_rays(table, np.array([0, len(table)], dtype=np.int64),
                          np.asarray(origin, dtype=np.float64).reshape(1, 3),
                          direction.reshape(1, 1, 3).copy())[0, 0]
    return None if not np.isfinite(t) else float(t)


@dataclass
class EnvSpec:
    """Random scene distribution. Lengths in meters; angles in radians."""

    obstacle_count: tuple[int, int] = (4, 8)
    kind_weights: dict = field(default_factory=lambda: {"cylinder": 0.5, "sphere": 0.25, "cuboid": 0.25})
    sphere_radius: tuple[float, float] = (0.4, 1.0)
    cylinder_radius: tuple[float, float] = (0.2, 0.5)
    cylinder_height: tuple[float, float] = (3.0, 6.0)
    cuboid_half_extent: tuple[float, float] = (0.3, 1.0)
    arena_size: tuple[float, float, float] = (40.0, 40.0, 8.0)
    altitude: tuple[float, float] = (1.0, 2.5)
    goal_distance: tuple[float, float] = (20.0, 40.0)
    obstacle_band: tuple[float, float] = (0.0, 1.0)
    lateral_band: float = 0.0
    clearance: float = 1.0
    max_retries: int = 100
    seed: int = 0

    def validate(self) -> None:
        for name in ("obstacle_count", "sphere_radius", "cylinder_radius", "cylinder_height",
                     "cuboid_half_extent", "altitude", "goal_distance", "obstacle_band"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise GeometryError(f"{name}: min {lo} > max {hi}")
        if self.obstacle_count[0] < 0:
            raise GeometryError("obstacle_count must be non-negative")
        if min(self.arena_size) <= 0:
            raise GeometryError("arena_size must be positive")
        if not self.kind_weights or sum(self.kind_weights.values()) <= 0:
            raise GeometryError("kind_weights must contain a positive weight")
        unknown = set(self.kind_weights) - {"cylinder", "sphere", "cuboid"}
        if unknown:
            raise GeometryError(f"unknown obstacle kinds {sorted(unknown)}")


def _sample_start_goal(spec: EnvSpec, rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray):
    margin = spec.clearance
    for _ in range(spec.max_retries):
        z0, z1 = rng.uniform(*spec.altitude, size=2)
        dist = rng.uniform(*spec.goal_distance)
        bearing = rng.uniform(-math.pi, math.pi)
        cx, cy = 0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])
        half = 0.5 * dist
        start = np.array([cx - half * math.cos(bearing), cy - half * math.sin(bearing), z0])
        goal = np.array([cx + half * math.cos(bearing), cy + half * math.sin(bearing), z1])
        inside = lambda p: np.all(p >= lo + [margin, margin, 0]) and np.all(p <= hi - [margin, margin, 0])
        if inside(start) and inside(goal):
            return start, goal
    raise GeometryError("cannot satisfy clearance: start/goal do not fit in the arena")


def _sample_obstacle(spec: EnvSpec, rng: np.random.Generator, kind: str, start, goal, lo, hi):
    if spec.lateral_band > 0:
        # concentrate obstacles around the start-goal corridor
        s = rng.uniform(*spec.obstacle_band)
        axis = goal[:2] - start[:2]
        n = np.array([-axis[1], axis[0]]) / max(np.linalg.norm(axis), 1e-9)
        xy = start[:2] + s * axis + rng.uniform(-spec.lateral_band, spec.lateral_band) * n
    else:
        xy = rng.uniform(lo[:2], hi[:2])
    if kind == "sphere":
        r = rng.uniform(*spec.sphere_radius)
        z = rng.uniform(lo[2], hi[2])
        return Sphere((xy[0], xy[1], z), r)
    if kind == "cylinder":
        r = rng.uniform(*spec.cylinder_radius)
        h = rng.uniform(*spec.cylinder_height)
        return Cylinder((xy[0], xy[1], 0.0), r, h)
    half = rng.uniform(*spec.cuboid_half_extent, size=3)
    z = rng.uniform(lo[2], hi[2])
    yaw = rng.uniform(-math.pi, math.pi)
    return Cuboid((xy[0], xy[1], z), half, yaw)


def generate_env(spec: EnvSpec, rng=None) -> World:
    """Sample a World; deterministic in (spec, seed). ``rng`` may be a seed or Generator."""
    spec.validate()
    if rng is None:
        rng = spec.seed
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sx, sy, sz = spec.arena_size
    lo = np.array([-0.5 * sx, -0.5 * sy, 0.0])
    hi = np.array([0.5 * sx, 0.5 * sy, sz])
    start, goal = _sample_start_goal(spec, rng, lo, hi)
    count = int(rng.integers(spec.obstacle_count[0], spec.obstacle_count[1] + 1))
    kinds = sorted(spec.kind_weights)
    w = np.array([spec.kind_weights[k] for k in kinds], dtype=float)
    prims: list = [ground_plane()]
    for _ in range(count):
        kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
        for _attempt in range(spec.max_retries):
            prim = _sample_obstacle(spec, rng, kind, start, goal, lo, hi)
            row = prim.row()[None]
            d_s = _closest_table(row, start)[0]
            d_g = _closest_table(row, goal)[0]
            if d_s >= spec.clearance and d_g >= spec.clearance:
                prims.append(prim)
                break
        else:
            raise GeometryError("cannot satisfy clearance after "
                                f"{spec.max_retries} placement attempts")
    world = World(tuple(prims), lo, hi, start, goal)
    world.check(spec.clearance)
    return world


def _prim_to_dict(p) -> dict:
    d = {"kind": p.kind}
    if isinstance(p, Plane):
        d.update(point=list(p.point), normal=list(p.normal))
    elif isinstance(p, Cuboid):
        d.update(center=list(p.center), half_extents=list(p.half_extents), yaw=p.yaw)
    elif isinstance(p, Sphere):
        d.update(center=list(p.center), radius=p.radius)
    else:
        d.update(base=list(p.base), radius=p.radius, height=p.height)
    return d


def world_to_dict(world: World) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "arena": {"lo": list(world.arena_lo), "hi": list(world.arena_hi)},
        "start": list(world.start),
        "goal": list(world.goal),
        "primitives": [_prim_to_dict(p) for p in world.primitives],
    }


def world_from_dict(d: dict) -> World:
    if d.get("format") != SCENE_FORMAT:
        raise GeometryError("not a scene file")
    if d.get("version") != SCENE_VERSION:
        raise GeometryError(f"unsupported scene version {d.get('version')!r}")
    prims = []
    for rec in d["primitives"]:
        rec = dict(rec)
        cls = _KINDS.get(rec.pop("kind", None))
        if cls is None:
            raise GeometryError(f"unknown primitive record {rec!r}")
        prims.append(cls(**rec))
    return World(tuple(prims), d["arena"]["lo"], d["arena"]["hi"], d["start"], d["goal"])


def save_scene(world: World, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(world_to_dict(world), indent=1) + "\n")


def load_scene(path) -> World:
    return world_from_dict(json.loads(Path(path).read_text()))
