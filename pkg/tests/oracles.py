"""Independent reference implementations used to check the library.

Nothing here calls the kernels: primitives are handled through implicit inside-tests
and explicit surface samples.
"""
from __future__ import annotations

import math

import numpy as np

from newtonfly.geometry import Cuboid, Cylinder, Plane, Sphere


def _to_local_cuboid(prim: Cuboid, x: np.ndarray) -> np.ndarray:
    c, s = math.cos(prim.yaw), math.sin(prim.yaw)
    d = x - np.asarray(prim.center)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


def inside(prim, x: np.ndarray) -> np.ndarray:
    """Boolean mask of points on or inside a primitive."""
    if isinstance(prim, Plane):
        return (x - np.asarray(prim.point)) @ np.asarray(prim.normal) <= 0.0
    if isinstance(prim, Sphere):
        return np.sum((x - np.asarray(prim.center)) ** 2, axis=-1) <= prim.radius ** 2
    if isinstance(prim, Cylinder):
        d = x - np.asarray(prim.base)
        return (d[..., 0] ** 2 + d[..., 1] ** 2 <= prim.radius ** 2) & (d[..., 2] >= 0) & (d[..., 2] <= prim.height)
    if isinstance(prim, Cuboid):
        loc = _to_local_cuboid(prim, x)
        return np.all(np.abs(loc) <= np.asarray(prim.half_extents), axis=-1)
    raise TypeError(prim)


def inside_any(prims, x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[:-1], dtype=bool)
    for p in prims:
        out |= inside(p, x)
    return out


def march(prims, origins: np.ndarray, dirs: np.ndarray, max_t: float = 10.5, step: float = 1e-3) -> np.ndarray:
    """First t at which origin + t*dir is inside any primitive (fixed-step marching), inf if none."""
    n = len(origins)
    hit = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    for i in range(1, int(max_t / step) + 1):
        t = i * step
        idx = np.nonzero(active)[0]
        if not len(idx):
            break
        pts = origins[idx] + t * dirs[idx]
        now = inside_any(prims, pts)
        hit[idx[now]] = t
        active[idx[now]] = False
    return hit


def surface_samples(prim, spacing: float, window: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Points on the primitive surface with roughly ``spacing`` between neighbours."""
    if isinstance(prim, Sphere):
        n = max(100, int(4 * math.pi * prim.radius ** 2 / spacing ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = math.pi * (1 + 5 ** 0.5) * i
        u = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)
        return np.asarray(prim.center) + prim.radius * u
    if isinstance(prim, Cylinder):
        r, h = prim.radius, prim.height
        na = max(16, int(2 * math.pi * r / spacing))
        nz = max(2, int(h / spacing) + 1)
        ang = np.linspace(0, 2 * math.pi, na, endpoint=False)
        zs = np.linspace(0, h, nz)
        A, Z = np.meshgrid(ang, zs)
        side = np.stack([r * np.cos(A).ravel(), r * np.sin(A).ravel(), Z.ravel()], axis=-1)
        g = np.arange(-r, r + spacing, spacing)
        X, Y = np.meshgrid(g, g)
        keep = X ** 2 + Y ** 2 <= r * r
        disk = np.stack([X[keep], Y[keep]], axis=-1)
        caps = [np.column_stack([disk, np.full(len(disk), z)]) for z in (0.0, h)]
        return np.asarray(prim.base) + np.concatenate([side] + caps)
    if isinstance(prim, Cuboid):
        hx, hy, hz = prim.half_extents
        pts = []
        for axis, half in enumerate((hx, hy, hz)):
            others = [a for a in range(3) if a != axis]
            ha = (hx, hy, hz)[others[0]]
            hb = (hx, hy, hz)[others[1]]
            ga = np.linspace(-ha, ha, max(2, int(2 * ha / spacing) + 1))
            gb = np.linspace(-hb, hb, max(2, int(2 * hb / spacing) + 1))
            A, B = np.meshgrid(ga, gb)
            for sign in (-1.0, 1.0):
                face = np.zeros((A.size, 3))
                face[:, axis] = sign * half
                face[:, others[0]] = A.ravel()
                face[:, others[1]] = B.ravel()
                pts.append(face)
        loc = np.concatenate(pts)
        c, s = math.cos(prim.yaw), math.sin(prim.yaw)
        world = np.stack([c * loc[:, 0] - s * loc[:, 1], s * loc[:, 0] + c * loc[:, 1], loc[:, 2]], axis=-1)
        return world + np.asarray(prim.center)
    if isinstance(prim, Plane):
        if window is None:
            raise ValueError("planes need a sampling window")
        lo, hi = window
        n = np.asarray(prim.normal)
        a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        center = 0.5 * (lo + hi)
        foot = center - ((center - np.asarray(prim.point)) @ n) * n
        half = 0.5 * float(np.max(hi - lo))
        g = np.arange(-half, half + spacing, spacing)
        U, V = np.meshgrid(g, g)
        return foot + U.ravel()[:, None] * a + V.ravel()[:, None] * b
    raise TypeError(prim)


def dense_distance(samples: np.ndarray, points: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    """Min Euclidean distance from each point to a sample cloud (brute force)."""
    best = np.full(len(points), np.inf)
    for i in range(0, len(samples), chunk):
        s = samples[i:i + chunk]
        d2 = (np.sum(points ** 2, axis=1)[:, None] - 2 * points @ s.T + np.sum(s ** 2, axis=1)[None, :])
        best = np.minimum(best, np.sqrt(np.maximum(d2.min(axis=1), 0.0)))
    return best


def gae_double_loop(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float,
                    last_value: float = 0.0) -> np.ndarray:
    """A_k = sum_{l>=0} (gamma*lam)^l delta_{k+l}, evaluated directly in O(T^2)."""
    T = len(rewards)
    v_next = np.append(values[1:], last_value)
    delta = rewards + gamma * v_next - values
    adv = np.zeros(T)
    for k in range(T):
        for l in range(T - k):
            adv[k] += (gamma * lam) ** l * delta[k + l]
    return adv


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g
