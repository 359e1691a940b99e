"""Point-mass quadrotor model with actuator latency, drag and trapezoidal integration.

Functions take arrays of shape (..., 3) or tape Nodes; on Nodes they record ops whose
vector-Jacobian products use the analytic Jacobians defined here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

GRAVITY = 9.81


@dataclass
class LatencyParams:
    lam: float = 12.0
    tau: float = 1.0 / 15.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("latency smoothing rate must be > 0")
        if self.tau < 0:
            raise ValueError("latency delay must be >= 0")


@dataclass
class DragParams:
    quadratic: float = 0.06
    linear: float = 0.1

    def __post_init__(self):
        if np.any(np.asarray(self.quadratic) < 0) or np.any(np.asarray(self.linear) < 0):
            raise ValueError("drag coefficients must be >= 0")


@dataclass
class DynamicsParams:
    latency: LatencyParams = field(default_factory=LatencyParams)
    drag: DragParams = field(default_factory=DragParams)
    thrust_to_weight: float = 3.6
    gravity: float = GRAVITY
    clamp_sharpness: float = 2.0

    @property
    def max_thrust(self) -> float:
        return self.thrust_to_weight * self.gravity


def gravity_vector(g: float = GRAVITY) -> np.ndarray:
    return np.array([0.0, 0.0, -g])


def delay_slots(tau: float, dt: float) -> int:
    # tolerance keeps tau == dt at exactly one slot despite float division
    return max(0, math.ceil(tau / dt - 1e-9))


def smoothing_gain(lam: float, dt: float) -> float:
    """Exact-hold discretization of the exponential lag: 1 - exp(-lam*dt)."""
    return -math.expm1(-lam * dt)


def impulse_response(t: np.ndarray, params: LatencyParams) -> np.ndarray:
    """Continuous flight-controller response: 0 before tau, lam*exp(-lam*(t-tau)) after."""
    t = np.asarray(t, dtype=float)
    return np.where(t < params.tau, 0.0, params.lam * np.exp(-params.lam * (t - params.tau)))


@dataclass
class ActuatorState:
    delay: list
    uhat: object
    a_prev: object


def init_actuator(uhat0, v0, dt: float, params: DynamicsParams) -> ActuatorState:
    """Steady actuator: delay line filled with ``uhat0``; a_prev consistent with (uhat0, v0)."""
    n = delay_slots(params.latency.tau, dt)
    return ActuatorState([uhat0] * n, uhat0, total_accel(uhat0, v0, params.drag, params.gravity))


# ----------------------------------------------------------------------------- latency

def latency_update(uhat, u_delayed, gain: float):
    uv, dv = ad.val(uhat), ad.val(u_delayed)
    out = uv + gain * (dv - uv)
    return ad.record("latency", out, (uhat, u_delayed), lambda g: ((1.0 - gain) * g, gain * g))


def latency_step(act: ActuatorState, u_desired, dt: float, params: LatencyParams):
    """Push the command into the delay line, pop the delayed one and smooth it.

    Returns (uhat', act').
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    line = list(act.delay) + [u_desired]
    u_d, rest = line[0], line[1:]
    uhat = latency_update(act.uhat, u_d, smoothing_gain(params.lam, dt))
    return uhat, ActuatorState(rest, uhat, act.a_prev)


def latency_jacobian(lam: float, dt: float) -> tuple[float, float]:
    """(d uhat'/d u_delayed, d uhat'/d uhat) as scalar multiples of identity."""
    c = smoothing_gain(lam, dt)
    return c, 1.0 - c


# ----------------------------------------------------------------------------- forces

def total_accel(uhat, v, drag: DragParams, g: float = GRAVITY):
    """a = uhat - th1*|v|*v - th2*v + gravity."""
    uv, vv = ad.val(uhat), ad.val(v)
    speed = np.sqrt(np.sum(vv * vv, axis=-1, keepdims=True))
    th1, th2 = drag.quadratic, drag.linear
    out = uv - th1 * speed * vv - th2 * vv + gravity_vector(g)

    def vjp(gr):
        safe = np.where(speed > 0, speed, 1.0)
        proj = np.where(speed > 0, vv * np.sum(vv * gr, axis=-1, keepdims=True) / safe, 0.0)
        gv = -th1 * (speed * gr + proj) - th2 * gr
        return gr, gv

    return ad.record("total_accel", out, (uhat, v), vjp)


def total_accel_jacobian(v: np.ndarray, drag: DragParams) -> tuple[np.ndarray, np.ndarray]:
    """(da/duhat, da/dv) for a single 3-vector velocity."""
    v = np.asarray(v, dtype=float)
    s = np.linalg.norm(v)
    eye = np.eye(3)
    dv = -drag.linear * eye
    if s > 0:
        dv = dv - drag.quadratic * (s * eye + np.outer(v, v) / s)
    return eye, dv


def drag_accel(v, drag: DragParams):
    v = np.asarray(v, dtype=float)
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    return -drag.quadratic * s * v - drag.linear * v


# ----------------------------------------------------------------------------- integration

def integrate(p, v, a0, a1, dt: float):
    """Trapezoidal velocity update and constant-accel position update.

    v' = v + (a0 + a1)/2 * dt ;  p' = p + v*dt + a0*dt^2/2. Returns (p', v').
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    pv, vv, a0v, a1v = (ad.val(x) for x in (p, v, a0, a1))
    h = 0.5 * dt
    v_new = ad.record("integrate_v", vv + (a0v + a1v) * h, (v, a0, a1),
                      lambda g: (g, h * g, h * g))
    hh = 0.5 * dt * dt
    p_new = ad.record("integrate_p", pv + vv * dt + a0v * hh, (p, v, a0),
                      lambda g: (g, dt * g, hh * g))
    return p_new, v_new


def integrate_jacobian(dt: float) -> dict[str, np.ndarray]:
    """Blocks of d(p', v')/d(p, v, a0, a1) as 3x3 matrices."""
    eye, zero = np.eye(3), np.zeros((3, 3))
    return {
        "p/p": eye, "p/v": dt * eye, "p/a0": 0.5 * dt * dt * eye, "p/a1": zero,
        "v/p": zero, "v/v": eye, "v/a0": 0.5 * dt * eye, "v/a1": 0.5 * dt * eye,
    }


# ----------------------------------------------------------------------------- thrust limit

def soft_clamp_thrust(u, max_accel: float, sharpness: float = 2.0, eps: float = 1e-9):
    """Smoothly limit |u| to [0, max_accel]; direction is preserved.

    |u'| = M - softplus(s*(M - |u|))/s, which is ~identity well below M.
    """
    uv = ad.val(u)
    m = np.sqrt(np.sum(uv * uv, axis=-1, keepdims=True) + eps * eps)
    z = sharpness * (max_accel - m)
    sp = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    m_out = max_accel - sp / sharpness
    scale = m_out / m
    out = uv * scale

    def vjp(g):
        sig = ad._sigmoid(z)
        dscale = (sig * m - m_out) / (m * m)
        return (scale * g + uv * (np.sum(uv * g, axis=-1, keepdims=True) * dscale / m),)

    return ad.record("soft_clamp", out, (u,), vjp)


# ----------------------------------------------------------------------------- attitude

@dataclass
class Attitude:
    forward: np.ndarray
    left: np.ndarray
    up: np.ndarray

    def axes(self) -> np.ndarray:
        """(..., 3, 3) with rows forward, left, up."""
        return np.stack([self.forward, self.left, self.up], axis=-2)


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def attitude_from_thrust(uhat, target_dir, prev_forward=None, eps: float = 1e-3) -> Attitude:
    """Body frame whose up axis is the thrust direction and whose forward axis faces the target.

    Works on (3,) or (B, 3). Degenerate thrust falls back to up = +z; a target parallel to
    up keeps ``prev_forward`` (or world +x when none is given).
    """
    u = np.atleast_2d(np.asarray(ad.val(uhat), dtype=float))
    t = np.atleast_2d(np.asarray(target_dir, dtype=float))
    single = np.ndim(ad.val(uhat)) == 1
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    up = np.where(n > eps, u / np.where(n > eps, n, 1.0), z)
    f = t - np.sum(t * up, axis=-1, keepdims=True) * up
    fn = np.linalg.norm(f, axis=-1, keepdims=True)
    if prev_forward is None:
        prev = np.broadcast_to(np.array([1.0, 0.0, 0.0]), up.shape)
    else:
        prev = np.atleast_2d(np.asarray(prev_forward, dtype=float))
    fb = prev - np.sum(prev * up, axis=-1, keepdims=True) * up
    fbn = np.linalg.norm(fb, axis=-1, keepdims=True)
    # previous forward itself parallel to up: pick any perpendicular axis
    alt = np.cross(up, np.array([0.0, 1.0, 0.0]))
    alt = np.where(np.linalg.norm(alt, axis=-1, keepdims=True) > 1e-6, alt, np.cross(up, z[[1, 2, 0]]))
    fb = np.where(fbn > 1e-6, fb, alt)
    fwd = np.where(fn > 1e-6, f / np.where(fn > 1e-6, fn, 1.0), _unit(fb))
    left = np.cross(up, fwd)
    left = _unit(left)
    fwd = np.cross(left, up)
    if single:
        return Attitude(fwd[0], left[0], up[0])
    return Attitude(fwd, left, up)
