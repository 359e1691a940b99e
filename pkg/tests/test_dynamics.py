import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from newtonfly import autodiff as ad
from newtonfly.dynamics import (GRAVITY, DragParams, DynamicsParams, LatencyParams, attitude_from_thrust,
                                delay_slots, drag_accel, impulse_response, init_actuator, integrate,
                                latency_step, latency_update, smoothing_gain, soft_clamp_thrust, total_accel)

from oracles import central_difference


def test_hover_is_equilibrium():
    a = total_accel(np.array([0, 0, GRAVITY]), np.zeros(3), DragParams())
    np.testing.assert_array_equal(a, np.zeros(3))


def test_drag_example():
    a = total_accel(np.array([0, 0, GRAVITY]), np.array([10.0, 0, 0]), DragParams(0.05, 0.1))
    np.testing.assert_allclose(a, [-6.0, 0, 0], atol=1e-12)


def test_default_drag_is_significant_at_9_mps():
    assert np.linalg.norm(drag_accel(np.array([9.0, 0, 0]), DragParams())) > 5.0


def test_negative_drag_rejected():
    with pytest.raises(ValueError):
        DragParams(-0.1, 0.0)


def test_integrate_example():
    p, v = integrate(np.zeros(3), np.zeros(3), np.array([0, 0, 2.0]), np.array([0, 0, 2.0]), 0.1)
    np.testing.assert_allclose(v, [0, 0, 0.2], atol=1e-15)
    np.testing.assert_allclose(p, [0, 0, 0.01], atol=1e-15)


def test_integrate_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        integrate(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), 0.0)


@pytest.mark.parametrize("n", [1, 7, 150])
def test_constant_acceleration_matches_closed_form(n):
    rng = np.random.default_rng(n)
    p0, v0, a = rng.normal(size=(3, 3))
    dt = 1 / 15
    p, v = p0, v0
    for _ in range(n):
        p, v = integrate(p, v, a, a, dt)
    T = n * dt
    np.testing.assert_allclose(p, p0 + v0 * T + 0.5 * a * T * T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(v, v0 + a * T, rtol=1e-12, atol=1e-12)


def test_latency_zero_before_delay_and_unit_dc_gain():
    lat = LatencyParams(12.0, 0.2)
    dt = 1 / 60
    act = init_actuator(np.zeros(3), np.zeros(3), dt, DynamicsParams(latency=lat))
    out = []
    for _ in range(400):
        uhat, act = latency_step(act, np.ones(3), dt, lat)
        out.append(uhat[0])
    out = np.array(out)
    t = dt * np.arange(1, len(out) + 1)
    assert np.all(out[t < lat.tau - 1e-12] == 0.0)
    assert abs(out[-1] - 1.0) < 1e-9


@pytest.mark.parametrize("lam,tau,dt", [(12.0, 1 / 15, 1 / 15), (12.0, 1 / 15, 1 / 60), (5.0, 0.1, 0.02)])
def test_step_response_crosses_632_within_one_step(lam, tau, dt):
    lat = LatencyParams(lam, tau)
    act = init_actuator(np.zeros(1), np.zeros(1), dt, DynamicsParams(latency=lat))
    for k in range(1, 1000):
        uhat, act = latency_step(act, np.ones(1), dt, lat)
        if uhat[0] >= 1 - math.exp(-1):
            break
    assert abs(k * dt - (tau + 1 / lam)) <= dt


def test_discrete_impulse_response():
    lam, dt = 12.0, 1 / 120
    c = smoothing_gain(lam, dt)
    n = delay_slots(1 / 15, dt)
    line, y, resp = [0.0] * n, 0.0, []
    for k in range(int(round(25 / lam / dt)) + n):
        line.append(1.0 if k == 0 else 0.0)
        y = latency_update(y, line.pop(0), c)
        resp.append(y)
    resp = np.array(resp)
    assert np.all(resp >= 0)
    assert np.all(resp[:n] == 0)
    # a truncated geometric series: the tail beyond the window is exactly exp(-lam * window)
    m = int(round(10 / lam / dt))
    assert abs(resp[: n + m].sum() - (1 - math.exp(-lam * m * dt))) < 1e-12
    assert abs(resp.sum() - 1.0) < 1e-9


def test_continuous_impulse_response_integrates_to_one():
    lat = LatencyParams(12.0, 1 / 15)
    t = np.linspace(0, 30 / lat.lam + lat.tau, 400_001)
    h = impulse_response(t, lat)
    assert np.all(h[t < lat.tau] == 0)
    assert abs(np.trapezoid(h, t) - 1.0) < 1e-4


def test_terminal_speed_quadratic_drag():
    th1, push, dt = 0.05, 6.0, 1 / 60
    drag = DragParams(th1, 0.0)
    u = np.array([push, 0.0, GRAVITY])
    p, v = np.zeros(3), np.zeros(3)
    a_prev = total_accel(u, v, drag)
    for _ in range(int(60 / dt)):
        a = total_accel(u, v, drag)
        p, v = integrate(p, v, a_prev, a, dt)
        a_prev = a
    assert abs(np.linalg.norm(v) - math.sqrt(push / th1)) < 1e-3


# ----------------------------------------------------------------------------- jacobians

def _jacobian(fn, x0):
    """Full Jacobian of a vector function from the tape, one seed per output."""
    rows = []
    y0 = np.asarray(fn(x0))
    for i in range(y0.size):
        tape = ad.Tape()
        xn = tape.param("x", x0)
        y = fn(xn)
        tape.finalize()
        seed = np.zeros(y0.shape)
        seed.flat[i] = 1.0
        rows.append(ad.backward(tape, {y: seed})["x"].ravel())
    return np.array(rows)


def _fd_jacobian(fn, x0, h=1e-6):
    y0 = np.asarray(fn(x0))
    return np.array([central_difference(lambda x: np.asarray(fn(x)).flat[i], x0, h).ravel()
                     for i in range(y0.size)])


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12)


def _cases(n=100, seed=0):
    return np.random.default_rng(seed).normal(scale=3.0, size=(n, 12))


def test_latency_jacobian_matches_fd():
    c = smoothing_gain(12.0, 1 / 15)
    for x in _cases():
        x = x[:6]
        f = lambda z: latency_update(ad.getitem(z, slice(0, 3)) if ad.is_node(z) else z[:3],
                                     ad.getitem(z, slice(3, 6)) if ad.is_node(z) else z[3:6], c)
        assert _rel(_jacobian(f, x), _fd_jacobian(f, x)) < 1e-5


def test_total_accel_jacobian_matches_fd():
    drag = DragParams()
    for x in _cases(seed=1):
        x = x[:6]
        f = lambda z: total_accel(z[0:3], z[3:6], drag)
        assert _rel(_jacobian(f, x), _fd_jacobian(f, x)) < 1e-5


def test_integrate_jacobian_matches_fd():
    for x in _cases(seed=2):
        f = lambda z: ad.concat(list(integrate(z[0:3], z[3:6], z[6:9], z[9:12], 1 / 15)), axis=0) \
            if ad.is_node(z) else np.concatenate(integrate(z[0:3], z[3:6], z[6:9], z[9:12], 1 / 15))
        assert _rel(_jacobian(f, x), _fd_jacobian(f, x)) < 1e-5


def test_soft_clamp_jacobian_matches_fd():
    M = 3.6 * GRAVITY
    for x in _cases(seed=3)[:30]:
        x = x[:3] * 8
        f = lambda z: soft_clamp_thrust(z, M)
        assert _rel(_jacobian(f, x), _fd_jacobian(f, x)) < 1e-5


# ----------------------------------------------------------------------------- limits and frames

@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-200, 200)] * 3))
def test_soft_clamp_bounds_and_direction(u):
    u = np.asarray(u)
    M = 3.6 * GRAVITY
    out = soft_clamp_thrust(u, M)
    assert np.linalg.norm(out) <= M + 1e-9
    if np.linalg.norm(u) > 1e-3:
        assert np.dot(out, u) >= 0
        np.testing.assert_allclose(np.cross(out, u), 0, atol=1e-6 * max(1.0, np.linalg.norm(u)))


def test_soft_clamp_near_identity_at_hover():
    u = np.array([1.0, -2.0, GRAVITY])
    np.testing.assert_allclose(soft_clamp_thrust(u, 3.6 * GRAVITY), u, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-30, 30)] * 3), st.tuples(*[st.floats(-1, 1)] * 3))
def test_attitude_is_right_handed_orthonormal(u, t):
    att = attitude_from_thrust(np.asarray(u), np.asarray(t) + np.array([1e-3, 0, 0]))
    R = att.axes()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    if np.linalg.norm(u) > 1e-2:
        np.testing.assert_allclose(att.up, np.asarray(u) / np.linalg.norm(u), atol=1e-9)


def test_attitude_faces_target_at_hover():
    att = attitude_from_thrust(np.array([0, 0, GRAVITY]), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_allclose(att.forward, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(att.left, [-1, 0, 0], atol=1e-12)


def test_attitude_degenerate_keeps_previous_forward():
    att = attitude_from_thrust(np.array([0, 0, GRAVITY]), np.array([0, 0, 1.0]), prev_forward=np.array([0, -1.0, 0]))
    np.testing.assert_allclose(att.forward, [0, -1, 0], atol=1e-12)
