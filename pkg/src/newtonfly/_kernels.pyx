# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels: batched ray casting, depth rendering and closest-point queries.

The primitive table layout is shared with ``_kernels_py`` (see ``newtonfly.geometry.pack``).
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sqrt, fabs, INFINITY

cnp.import_array()

cdef double EPS = 1e-9
cdef double TINY = 1e-15


cdef inline double _ray_hit(const double* r, double ox, double oy, double oz,
                            double dx, double dy, double dz) noexcept nogil:
    cdef int kind = <int>r[0]
    cdef double t = INFINITY, t0, t1, b, c, disc, s, denom
    cdef double lx, ly, lz, ldx, ldy, ldz, tmin, tmax, ta, tb, tmp
    cdef double a, zc, xh, yh, z
    cdef int i
    if kind == 0:
        denom = dx * r[4] + dy * r[5] + dz * r[6]
        if fabs(denom) < 1e-12:
            return INFINITY
        t0 = ((r[1] - ox) * r[4] + (r[2] - oy) * r[5] + (r[3] - oz) * r[6]) / denom
        if t0 > EPS:
            return t0
        return INFINITY
    elif kind == 2:
        lx = ox - r[1]
        ly = oy - r[2]
        lz = oz - r[3]
        b = lx * dx + ly * dy + lz * dz
        c = lx * lx + ly * ly + lz * lz - r[4] * r[4]
        disc = b * b - c
        if disc < 0.0:
            return INFINITY
        s = sqrt(disc)
        t0 = -b - s
        if t0 > EPS:
            return t0
        t1 = -b + s
        if t1 > EPS:
            return t1
        return INFINITY
    elif kind == 1:
        lx = ox - r[1]
        ly = oy - r[2]
        lz = oz - r[3]
        # world -> local is R^T with R = yaw rotation
        tmp = r[7] * lx + r[8] * ly
        ly = -r[8] * lx + r[7] * ly
        lx = tmp
        ldx = r[7] * dx + r[8] * dy
        ldy = -r[8] * dx + r[7] * dy
        ldz = dz
        tmin = -INFINITY
        tmax = INFINITY
        for i in range(3):
            if i == 0:
                a = lx; b = ldx; c = r[4]
            elif i == 1:
                a = ly; b = ldy; c = r[5]
            else:
                a = lz; b = ldz; c = r[6]
            if fabs(b) < TINY:
                if fabs(a) > c:
                    return INFINITY
            else:
                ta = (-c - a) / b
                tb = (c - a) / b
                if ta > tb:
                    tmp = ta; ta = tb; tb = tmp
                if ta > tmin:
                    tmin = ta
                if tb < tmax:
                    tmax = tb
        if tmax < tmin or tmax <= EPS:
            return INFINITY
        if tmin > EPS:
            return tmin
        return tmax
    elif kind == 3:
        lx = ox - r[1]
        ly = oy - r[2]
        lz = oz - r[3]
        a = dx * dx + dy * dy
        if a > TINY:
            b = lx * dx + ly * dy
            c = lx * lx + ly * ly - r[4] * r[4]
            disc = b * b - a * c
            if disc >= 0.0:
                s = sqrt(disc)
                t0 = (-b - s) / a
                t1 = (-b + s) / a
                if t0 > EPS:
                    z = lz + t0 * dz
                    if z >= 0.0 and z <= r[5] and t0 < t:
                        t = t0
                if t1 > EPS:
                    z = lz + t1 * dz
                    if z >= 0.0 and z <= r[5] and t1 < t:
                        t = t1
        if fabs(dz) > TINY:
            for i in range(2):
                zc = 0.0 if i == 0 else r[5]
                t0 = (zc - lz) / dz
                if t0 > EPS and t0 < t:
                    xh = lx + t0 * dx
                    yh = ly + t0 * dy
                    if xh * xh + yh * yh <= r[4] * r[4]:
                        t = t0
        return t
    return INFINITY


cdef inline bint _bsphere_miss(const double* r, double ox, double oy, double oz,
                               double dx, double dy, double dz, double best) noexcept nogil:
    # conservative prefilter; planes carry an infinite bounding radius
    cdef double rad = r[12]
    if rad == INFINITY:
        return False
    cdef double cx = r[9] - ox, cy = r[10] - oy, cz = r[11] - oz
    cdef double along = cx * dx + cy * dy + cz * dz
    cdef double d2 = cx * cx + cy * cy + cz * cz - along * along
    if d2 > rad * rad:
        return True
    if along - rad > best:
        return True
    return False


cdef inline double _closest(const double* r, double px, double py, double pz,
                            double* q) noexcept nogil:
    """Distance from p to the primitive surface (0 inside); writes the closest point to q."""
    cdef int kind = <int>r[0]
    cdef double lx, ly, lz, n, s, qx, qy, qz, rho, d
    if kind == 0:
        s = (px - r[1]) * r[4] + (py - r[2]) * r[5] + (pz - r[3]) * r[6]
        q[0] = px - s * r[4]
        q[1] = py - s * r[5]
        q[2] = pz - s * r[6]
        return s if s > 0.0 else 0.0
    elif kind == 2:
        lx = px - r[1]
        ly = py - r[2]
        lz = pz - r[3]
        n = sqrt(lx * lx + ly * ly + lz * lz)
        if n <= r[4]:
            if n > 0.0:
                q[0] = r[1] + r[4] * lx / n
                q[1] = r[2] + r[4] * ly / n
                q[2] = r[3] + r[4] * lz / n
            else:
                q[0] = r[1] + r[4]
                q[1] = r[2]
                q[2] = r[3]
            return 0.0
        q[0] = r[1] + r[4] * lx / n
        q[1] = r[2] + r[4] * ly / n
        q[2] = r[3] + r[4] * lz / n
        return n - r[4]
    elif kind == 1:
        lx = px - r[1]
        ly = py - r[2]
        lz = pz - r[3]
        s = r[7] * lx + r[8] * ly
        ly = -r[8] * lx + r[7] * ly
        lx = s
        qx = lx if lx < r[4] else r[4]
        qx = qx if qx > -r[4] else -r[4]
        qy = ly if ly < r[5] else r[5]
        qy = qy if qy > -r[5] else -r[5]
        qz = lz if lz < r[6] else r[6]
        qz = qz if qz > -r[6] else -r[6]
        q[0] = r[1] + r[7] * qx - r[8] * qy
        q[1] = r[2] + r[8] * qx + r[7] * qy
        q[2] = r[3] + qz
        d = sqrt((lx - qx) * (lx - qx) + (ly - qy) * (ly - qy) + (lz - qz) * (lz - qz))
        return d
    elif kind == 3:
        lx = px - r[1]
        ly = py - r[2]
        lz = pz - r[3]
        rho = sqrt(lx * lx + ly * ly)
        if rho > r[4]:
            qx = r[4] * lx / rho
            qy = r[4] * ly / rho
        else:
            qx = lx
            qy = ly
        qz = lz if lz < r[5] else r[5]
        qz = qz if qz > 0.0 else 0.0
        if rho <= r[4] and lz >= 0.0 and lz <= r[5]:
            # inside: report the nearest wall point
            if r[4] - rho <= lz and r[4] - rho <= r[5] - lz:
                if rho > 0.0:
                    qx = r[4] * lx / rho
                    qy = r[4] * ly / rho
                else:
                    qx = r[4]
                    qy = 0.0
                qz = lz
            elif lz <= r[5] - lz:
                qz = 0.0
            else:
                qz = r[5]
            q[0] = r[1] + qx
            q[1] = r[2] + qy
            q[2] = r[3] + qz
            return 0.0
        q[0] = r[1] + qx
        q[1] = r[2] + qy
        q[2] = r[3] + qz
        return sqrt((lx - qx) * (lx - qx) + (ly - qy) * (ly - qy) + (lz - qz) * (lz - qz))
    q[0] = px
    q[1] = py
    q[2] = pz
    return INFINITY


def cast_rays(const double[:, ::1] table, const long[::1] offsets,
              const double[:, ::1] origins, const double[:, :, ::1] dirs, int num_threads=1):
    """Hit distance along each ray (inf if none). dirs: (L, R, 3) unit vectors."""
    cdef Py_ssize_t L = dirs.shape[0], R = dirs.shape[1]
    out_arr = np.empty((L, R), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t lane, k, j
    cdef double best, t, ox, oy, oz, dx, dy, dz
    for lane in prange(L, nogil=True, num_threads=num_threads, schedule="static"):
        ox = origins[lane, 0]
        oy = origins[lane, 1]
        oz = origins[lane, 2]
        for k in range(R):
            dx = dirs[lane, k, 0]
            dy = dirs[lane, k, 1]
            dz = dirs[lane, k, 2]
            best = INFINITY
            for j in range(offsets[lane], offsets[lane + 1]):
                if _bsphere_miss(&table[j, 0], ox, oy, oz, dx, dy, dz, best):
                    continue
                t = _ray_hit(&table[j, 0], ox, oy, oz, dx, dy, dz)
                if t < best:
                    best = t
            out[lane, k] = best
    return out_arr


def render(const double[:, ::1] table, const long[::1] offsets,
           const double[:, ::1] origins, const double[:, :, ::1] axes,
           const double[:, ::1] cam_dirs, int num_threads=1):
    """z-depth per pixel (inf if no hit).

    axes[lane] rows are the body forward, left and up unit vectors; cam_dirs are
    unit pixel directions expressed as (forward, left, up) components.
    """
    cdef Py_ssize_t L = origins.shape[0], R = cam_dirs.shape[0]
    out_arr = np.empty((L, R), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t lane, k, j
    cdef double best, t, ox, oy, oz, dx, dy, dz, cf, cl, cu
    for lane in prange(L, nogil=True, num_threads=num_threads, schedule="static"):
        ox = origins[lane, 0]
        oy = origins[lane, 1]
        oz = origins[lane, 2]
        for k in range(R):
            cf = cam_dirs[k, 0]
            cl = cam_dirs[k, 1]
            cu = cam_dirs[k, 2]
            dx = cf * axes[lane, 0, 0] + cl * axes[lane, 1, 0] + cu * axes[lane, 2, 0]
            dy = cf * axes[lane, 0, 1] + cl * axes[lane, 1, 1] + cu * axes[lane, 2, 1]
            dz = cf * axes[lane, 0, 2] + cl * axes[lane, 1, 2] + cu * axes[lane, 2, 2]
            best = INFINITY
            for j in range(offsets[lane], offsets[lane + 1]):
                if _bsphere_miss(&table[j, 0], ox, oy, oz, dx, dy, dz, best):
                    continue
                t = _ray_hit(&table[j, 0], ox, oy, oz, dx, dy, dz)
                if t < best:
                    best = t
            out[lane, k] = best * cf
    return out_arr


cdef inline long _closest_lane(const double[:, ::1] table, long start, long stop,
                               double px, double py, double pz,
                               double* dout, double* qout) noexcept nogil:
    cdef double q[3]
    cdef double best = INFINITY, d
    cdef long j, idx = -1
    qout[0] = px
    qout[1] = py
    qout[2] = pz
    for j in range(start, stop):
        d = _closest(&table[j, 0], px, py, pz, q)
        # strict comparison keeps the lowest index on ties
        if d < best:
            best = d
            idx = j - start
            qout[0] = q[0]
            qout[1] = q[1]
            qout[2] = q[2]
    dout[0] = best
    return idx


def closest(const double[:, ::1] table, const long[::1] offsets,
            const double[:, ::1] points, int num_threads=1):
    """Per-lane minimum surface distance, closest point and primitive index (-1 if none)."""
    cdef Py_ssize_t L = points.shape[0]
    d_arr = np.empty(L, dtype=np.float64)
    q_arr = np.empty((L, 3), dtype=np.float64)
    idx_arr = np.empty(L, dtype=np.int64)
    cdef double[::1] dout = d_arr
    cdef double[:, ::1] qout = q_arr
    cdef long[::1] iout = idx_arr
    cdef Py_ssize_t lane
    for lane in prange(L, nogil=True, num_threads=num_threads, schedule="static"):
        iout[lane] = _closest_lane(table, offsets[lane], offsets[lane + 1],
                                   points[lane, 0], points[lane, 1], points[lane, 2],
                                   &dout[lane], &qout[lane, 0])
    return d_arr, q_arr, idx_arr
