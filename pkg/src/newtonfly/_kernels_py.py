"""Pure numpy fallback for the compiled geometry kernels.

Same signatures and table layout as ``_kernels``; ``num_threads`` is accepted and ignored.
Loops run over lanes and primitives, vectorized over rays.
"""
from __future__ import annotations

import numpy as np

EPS = 1e-9
TINY = 1e-15


def _ray_hit(r: np.ndarray, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Hit distance of rays (o broadcast against d of shape (R, 3)) with one primitive row."""
    kind = int(r[0])
    n = d.shape[0]
    inf = np.full(n, np.inf)
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == 0:
            denom = dx * r[4] + dy * r[5] + dz * r[6]
            t0 = ((r[1] - o[0]) * r[4] + (r[2] - o[1]) * r[5] + (r[3] - o[2]) * r[6]) / denom
            ok = (np.abs(denom) >= 1e-12) & (t0 > EPS)
            return np.where(ok, t0, inf)
        lx, ly, lz = o[0] - r[1], o[1] - r[2], o[2] - r[3]
        if kind == 2:
            b = lx * dx + ly * dy + lz * dz
            c = lx * lx + ly * ly + lz * lz - r[4] * r[4]
            disc = b * b - c
            s = np.sqrt(np.maximum(disc, 0.0))
            t0 = -b - s
            t1 = -b + s
            t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, inf))
            return np.where(disc < 0.0, inf, t)
        if kind == 1:
            tmp = r[7] * lx + r[8] * ly
            ly = -r[8] * lx + r[7] * ly
            lx = tmp
            ldx = r[7] * dx + r[8] * dy
            ldy = -r[8] * dx + r[7] * dy
            tmin = np.full(n, -np.inf)
            tmax = np.full(n, np.inf)
            miss = np.zeros(n, dtype=bool)
            for a, b, c in ((lx, ldx, r[4]), (ly, ldy, r[5]), (lz, dz, r[6])):
                par = np.abs(b) < TINY
                if abs(a) > c:
                    miss |= par
                ta = (-c - a) / b
                tb = (c - a) / b
                lo = np.minimum(ta, tb)
                hi = np.maximum(ta, tb)
                tmin = np.where(par, tmin, np.maximum(tmin, lo))
                tmax = np.where(par, tmax, np.minimum(tmax, hi))
            miss |= (tmax < tmin) | (tmax <= EPS)
            t = np.where(tmin > EPS, tmin, tmax)
            return np.where(miss, inf, t)
        if kind == 3:
            t = inf.copy()
            a = dx * dx + dy * dy
            b = lx * dx + ly * dy
            c = lx * lx + ly * ly - r[4] * r[4]
            disc = b * b - a * c
            side = (a > TINY) & (disc >= 0.0)
            s = np.sqrt(np.maximum(disc, 0.0))
            for tc in ((-b - s) / a, (-b + s) / a):
                z = lz + tc * dz
                ok = side & (tc > EPS) & (z >= 0.0) & (z <= r[5]) & (tc < t)
                t = np.where(ok, tc, t)
            for zc in (0.0, r[5]):
                tc = (zc - lz) / dz
                xh = lx + tc * dx
                yh = ly + tc * dy
                ok = (np.abs(dz) > TINY) & (tc > EPS) & (tc < t) & (xh * xh + yh * yh <= r[4] * r[4])
                t = np.where(ok, tc, t)
            return t
    return inf


def _closest(r: np.ndarray, p: np.ndarray) -> tuple[float, np.ndarray]:
    kind = int(r[0])
    px, py, pz = p
    if kind == 0:
        s = (px - r[1]) * r[4] + (py - r[2]) * r[5] + (pz - r[3]) * r[6]
        q = np.array([px - s * r[4], py - s * r[5], pz - s * r[6]])
        return (s if s > 0.0 else 0.0), q
    lx, ly, lz = px - r[1], py - r[2], pz - r[3]
    if kind == 2:
        n = np.sqrt(lx * lx + ly * ly + lz * lz)
        if n > 0.0:
            q = np.array([r[1] + r[4] * lx / n, r[2] + r[4] * ly / n, r[3] + r[4] * lz / n])
        else:
            q = np.array([r[1] + r[4], r[2], r[3]])
        return (0.0 if n <= r[4] else n - r[4]), q
    if kind == 1:
        s = r[7] * lx + r[8] * ly
        ly = -r[8] * lx + r[7] * ly
        lx = s
        qx = min(max(lx, -r[4]), r[4])
        qy = min(max(ly, -r[5]), r[5])
        qz = min(max(lz, -r[6]), r[6])
        q = np.array([r[1] + r[7] * qx - r[8] * qy, r[2] + r[8] * qx + r[7] * qy, r[3] + qz])
        d = np.sqrt((lx - qx) * (lx - qx) + (ly - qy) * (ly - qy) + (lz - qz) * (lz - qz))
        return d, q
    if kind == 3:
        rho = np.sqrt(lx * lx + ly * ly)
        if rho > r[4]:
            qx, qy = r[4] * lx / rho, r[4] * ly / rho
        else:
            qx, qy = lx, ly
        qz = min(max(lz, 0.0), r[5])
        if rho <= r[4] and 0.0 <= lz <= r[5]:
            if r[4] - rho <= lz and r[4] - rho <= r[5] - lz:
                if rho > 0.0:
                    qx, qy = r[4] * lx / rho, r[4] * ly / rho
                else:
                    qx, qy = r[4], 0.0
                qz = lz
            elif lz <= r[5] - lz:
                qz = 0.0
            else:
                qz = r[5]
            return 0.0, np.array([r[1] + qx, r[2] + qy, r[3] + qz])
        d = np.sqrt((lx - qx) * (lx - qx) + (ly - qy) * (ly - qy) + (lz - qz) * (lz - qz))
        return d, np.array([r[1] + qx, r[2] + qy, r[3] + qz])
    return np.inf, np.array(p, dtype=float)


def cast_rays(table, offsets, origins, dirs, num_threads=1):
    dirs = np.asarray(dirs, dtype=np.float64)
    out = np.full(dirs.shape[:2], np.inf)
    for lane in range(dirs.shape[0]):
        o = origins[lane]
        for j in range(offsets[lane], offsets[lane + 1]):
            out[lane] = np.minimum(out[lane], _ray_hit(table[j], o, dirs[lane]))
    return out


def render(table, offsets, origins, axes, cam_dirs, num_threads=1):
    cam_dirs = np.asarray(cam_dirs, dtype=np.float64)
    L = origins.shape[0]
    out = np.empty((L, cam_dirs.shape[0]))
    for lane in range(L):
        dirs = cam_dirs @ axes[lane]
        best = np.full(cam_dirs.shape[0], np.inf)
        o = origins[lane]
        for j in range(offsets[lane], offsets[lane + 1]):
            best = np.minimum(best, _ray_hit(table[j], o, dirs))
        out[lane] = best * cam_dirs[:, 0]
    return out


def closest(table, offsets, points, num_threads=1):
    L = points.shape[0]
    d_out = np.empty(L)
    q_out = np.array(points, dtype=np.float64, copy=True)
    idx = np.full(L, -1, dtype=np.int64)
    for lane in range(L):
        best = np.inf
        for j in range(offsets[lane], offsets[lane + 1]):
            d, q = _closest(table[j], points[lane])
            if d < best:
                best = d
                idx[lane] = j - offsets[lane]
                q_out[lane] = q
        d_out[lane] = best
    return d_out, q_out, idx
