"""Physics-driven training objective: velocity tracking, obstacle avoidance, smoothness."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class ObjectiveError(ValueError):
    pass


@dataclass
class LossWeights:
    velocity: float = 1.0
    collision: float = 2.0
    accel: float = 0.01
    jerk: float = 0.001

    def __post_init__(self):
        if min(self.velocity, self.collision, self.accel, self.jerk) < 0:
            raise ObjectiveError("loss weights must be >= 0")


@dataclass
class BarrierParams:
    """Obstacle-term shape.

    ``barrier="proximity"`` penalizes ln(1+exp(-beta2*(d-r))); ``"literal"`` uses
    ln(1+exp(+beta2*(d-r))). ``approach_scope="sum"`` multiplies both terms by the
    approach speed, ``"quadratic"`` only the truncated quadratic.
    """

    beta1: float = 2.5
    beta2: float = 32.0
    drone_radius: float = 0.15
    barrier: str = "proximity"
    approach_scope: str = "sum"

    def __post_init__(self):
        if self.beta1 <= 0 or self.beta2 <= 0 or self.drone_radius <= 0:
            raise ObjectiveError("beta1, beta2 and drone_radius must be > 0")
        if self.barrier not in ("proximity", "literal"):
            raise ObjectiveError(f"unknown barrier variant {self.barrier!r}")
        if self.approach_scope not in ("sum", "quadratic"):
            raise ObjectiveError(f"unknown approach scope {self.approach_scope!r}")


@dataclass
class StepRecord:
    """Per-step quantities stacked over time: arrays/Nodes of shape (T, B, ...)."""

    p: object          # post-step position (Node or array)
    v: object          # post-step velocity
    a: object          # acceleration applied during the step
    d: np.ndarray      # closest obstacle distance at p
    n_hat: np.ndarray  # unit direction toward the closest point
    vset: np.ndarray   # target velocity (gradient-stopped)
    u: object = None   # commanded thrust acceleration
    v_hat: object = None  # policy velocity estimate
    v_obs: np.ndarray | None = None  # velocity at observation time
    v_c: np.ndarray | None = None    # frozen approach speeds; recomputed from v when None

    def __post_init__(self):
        t = np.shape(ad.val(self.p))[0]
        for name in ("v", "a", "d", "n_hat", "vset"):
            if np.shape(ad.val(getattr(self, name)))[0] != t:
                raise ObjectiveError(f"record field {name} has a different length")

    @property
    def steps(self) -> int:
        return int(np.shape(ad.val(self.p))[0])


def make_vset(p, goal, v_max: float) -> np.ndarray:
    """Velocity toward the goal, |v| = min(dist / 1 s, v_max); zero within 1e-6 m."""
    if np.any(np.asarray(v_max) <= 0):
        raise ObjectiveError("v_max must be > 0")
    diff = np.asarray(goal, dtype=float) - np.asarray(p, dtype=float)
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    speed = np.minimum(dist, v_max)
    safe = np.where(dist < 1e-6, 1.0, dist)
    return np.where(dist < 1e-6, 0.0, diff / safe * speed)


def window_steps(window: float, dt: float) -> int:
    return max(1, math.ceil(window / dt - 1e-9))


def moving_average(x, n: int):
    """Trailing mean over min(k+1, n) samples along axis 0."""
    xv = ad.val(x)
    T = xv.shape[0]
    cs = np.concatenate([np.zeros_like(xv[:1]), np.cumsum(xv, axis=0)])
    k = np.arange(T)
    lo = np.maximum(0, k + 1 - n)
    cnt = (k + 1 - lo).astype(xv.dtype).reshape((T,) + (1,) * (xv.ndim - 1))
    out = (cs[k + 1] - cs[lo]) / cnt

    def vjp(g):
        s = g / cnt
        rc = np.concatenate([np.cumsum(s[::-1], axis=0)[::-1], np.zeros_like(s[:1])])
        # input j receives s_k for k in [j, min(T-1, j+n-1)]
        j = np.arange(T)
        hi = np.minimum(T, j + n)
        return (rc[j] - rc[hi],)

    return ad.record("moving_average", out, (x,), vjp)


def velocity_terms(V, vset, dt: float, window: float = 2.0):
    """Per-step SmoothL1(|vset - vbar|), shape (T, B)."""
    vbar = moving_average(V, window_steps(window, dt))
    err = ad.norm(ad.sub(np.asarray(vset, dtype=ad.val(V).dtype), vbar), axis=-1)
    return ad.smooth_l1(err)


def velocity_loss(records: StepRecord, dt: float, window: float = 2.0):
    return ad.mean(velocity_terms(records.v, records.vset, dt, window))


def closest_distance(p, d: np.ndarray, n_hat: np.ndarray):
    """Records d(p) with gradient -n_hat (zero where p is inside an obstacle)."""
    dv = np.asarray(d)
    n = np.asarray(n_hat)
    outside = (dv > 0)[..., None]
    return ad.record("closest_distance", dv.astype(ad.val(p).dtype, copy=False), (p,),
                     lambda g: (np.where(outside, -n * g[..., None], 0.0),))


def approach_speed(v, n_hat) -> np.ndarray:
    """max(0, v . n_hat), gradient-stopped."""
    return np.maximum(0.0, np.sum(np.asarray(ad.val(v)) * np.asarray(n_hat), axis=-1))


def obstacle_terms(records: StepRecord, barrier: BarrierParams):
    """Per-step obstacle penalty, shape (T, B)."""
    if np.any(np.asarray(records.d) < 0):
        raise ObjectiveError("closest distances must be >= 0")
    dtype = ad.val(records.p).dtype
    d = closest_distance(records.p, records.d, records.n_hat)
    s = ad.sub(d, dtype.type(barrier.drone_radius))
    quad = ad.square(ad.relu(ad.sub(dtype.type(1.0), s)))
    arg = ad.mul(s, dtype.type(-barrier.beta2 if barrier.barrier == "proximity" else barrier.beta2))
    bar = ad.mul(ad.softplus(arg), dtype.type(barrier.beta1))
    vc = records.v_c if records.v_c is not None else approach_speed(records.v, records.n_hat)
    vc = np.asarray(vc).astype(dtype)
    if barrier.approach_scope == "sum":
        return ad.mul(ad.add(quad, bar), vc)
    return ad.add(ad.mul(quad, vc), bar)


def obstacle_loss(records: StepRecord, barrier: BarrierParams):
    return ad.mean(obstacle_terms(records, barrier))


def smoothness_losses(records: StepRecord, dt: float):
    """(mean |a_k|^2, mean |(a_k - a_{k+1})/dt|^2)."""
    A = records.a
    la = ad.mean(ad.sum_sq(A, axis=-1))
    if records.steps < 2:
        raise ObjectiveError("jerk needs at least two steps")
    jerk = ad.mul(ad.sub(A[:-1], A[1:]), ad.val(A).dtype.type(1.0 / dt))
    lj = ad.mean(ad.sum_sq(jerk, axis=-1))
    return la, lj


def total_loss(lv, lc, la, lj, weights: LossWeights):
    for name, term in (("velocity", lv), ("collision", lc), ("accel", la), ("jerk", lj)):
        if not np.all(np.isfinite(ad.val(term))):
            raise ObjectiveError(f"non-finite {name} loss term")
    return (ad.mul(lv, weights.velocity) + ad.mul(lc, weights.collision)
            + ad.mul(la, weights.accel) + ad.mul(lj, weights.jerk))


def velocity_estimate_loss(records: StepRecord):
    """SmoothL1 between the velocity head and the observed velocity (target stopped)."""
    if records.v_hat is None or records.v_obs is None:
        raise ObjectiveError("records lack velocity estimates")
    target = np.asarray(records.v_obs, dtype=ad.val(records.v_hat).dtype)
    return ad.mean(ad.smooth_l1(ad.sub(records.v_hat, target)))


def step_costs(records: StepRecord, weights: LossWeights, barrier: BarrierParams, dt: float,
               window: float = 2.0) -> np.ndarray:
    """Weighted per-step loss contributions (T, B) as plain arrays.

    Summing over steps gives T*(wv*Lv + wc*Lc + wa*La) + (T-1)*wj*Lj per lane.
    """
    plain = StepRecord(ad.val(records.p), ad.val(records.v), ad.val(records.a),
                       records.d, records.n_hat, records.vset)
    A = np.asarray(plain.a, dtype=float)
    cost = weights.velocity * velocity_terms(np.asarray(plain.v, dtype=float), plain.vset, dt, window)
    cost = cost + weights.collision * obstacle_terms(
        StepRecord(np.asarray(plain.p, float), np.asarray(plain.v, float), A, plain.d, plain.n_hat, plain.vset,
                   v_c=records.v_c),
        barrier)
    cost = cost + weights.accel * np.sum(A * A, axis=-1)
    jerk = np.zeros(A.shape[:-1])
    jerk[1:] = np.sum(((A[:-1] - A[1:]) / dt) ** 2, axis=-1)
    return cost + weights.jerk * jerk
