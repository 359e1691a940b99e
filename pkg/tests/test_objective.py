import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from newtonfly import autodiff as ad
from newtonfly.objective import (BarrierParams, LossWeights, ObjectiveError, StepRecord, make_vset, moving_average,
                                 obstacle_terms, smoothness_losses, step_costs, total_loss, velocity_estimate_loss,
                                 velocity_loss, velocity_terms, window_steps)

DT = 1 / 15


def records(T=10, B=2, v=None, vset=None, a=None, d=None, n_hat=None, p=None):
    z = np.zeros((T, B, 3))
    return StepRecord(p if p is not None else z.copy(), v if v is not None else z.copy(),
                      a if a is not None else z.copy(),
                      d if d is not None else np.full((T, B), 5.0),
                      n_hat if n_hat is not None else np.tile([0.0, 0.0, -1.0], (T, B, 1)),
                      vset if vset is not None else z.copy())


# ----------------------------------------------------------------------------- target velocity

def test_vset_examples():
    np.testing.assert_array_equal(make_vset(np.array([1.0, 2, 3]), np.array([1.0, 2, 3]), 7.0), 0)
    np.testing.assert_allclose(make_vset(np.zeros(3), np.array([100.0, 0, 0]), 7.0), [7, 0, 0])
    assert np.linalg.norm(make_vset(np.zeros(3), np.array([2.0, 0, 0]), 7.0)) == pytest.approx(2.0)
    with pytest.raises(ObjectiveError):
        make_vset(np.zeros(3), np.ones(3), 0.0)


def test_vset_per_lane_speed_limits():
    p = np.zeros((2, 3))
    goal = np.array([[50.0, 0, 0], [0, 50.0, 0]])
    out = make_vset(p, goal, np.array([[3.0], [9.0]]))
    np.testing.assert_allclose(out, [[3, 0, 0], [0, 9, 0]])


def test_vset_is_gradient_stopped():
    tape = ad.Tape()
    p = tape.param("p", np.ones((1, 3)))
    vs = make_vset(ad.val(p), np.array([[10.0, 0, 0]]), 5.0)
    assert isinstance(vs, np.ndarray)
    loss = ad.sum(ad.mul(p, 0.0)) + ad.mean(velocity_terms(np.zeros((1, 1, 3)), vs[None], DT))
    tape.finalize()
    np.testing.assert_array_equal(ad.backward(tape, loss)["p"], 0.0)


# ----------------------------------------------------------------------------- velocity tracking

def test_velocity_loss_examples():
    vset = np.tile([3.0, 0, 0], (20, 2, 1))
    assert float(velocity_loss(records(20, v=vset.copy(), vset=vset), DT)) == 0.0
    for err, expect in ((0.5, 0.125), (2.0, 1.5)):
        v = vset + np.array([0, err, 0])
        assert float(velocity_loss(records(20, v=v, vset=vset), DT)) == pytest.approx(expect, abs=1e-12)


def test_moving_average_is_trailing_window():
    x = np.arange(6, dtype=float)[:, None]
    np.testing.assert_allclose(moving_average(x, 3)[:, 0], [0, 0.5, 1, 2, 3, 4])
    assert window_steps(2.0, 1 / 15) == 30


def test_velocity_loss_gradient_matches_fd():
    rng = np.random.default_rng(0)
    vset = rng.normal(size=(12, 2, 3)) * 3
    v0 = rng.normal(size=(12, 2, 3)) * 3

    def f(v):
        return velocity_loss(records(12, v=v, vset=vset), 0.2, window=0.6)

    tape = ad.Tape()
    vn = tape.param("v", v0)
    out = f(vn)
    tape.finalize()
    g = ad.backward(tape, out)["v"]
    h = 1e-6
    flat = v0.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fd = (float(f(xp.reshape(v0.shape))) - float(f(xm.reshape(v0.shape)))) / (2 * h)
        assert abs(g.flat[i] - fd) <= 1e-5 * max(abs(fd), 1e-3)


# ----------------------------------------------------------------------------- obstacles

def _obstacle_case(d, v, n_hat=(1.0, 0, 0), barrier=None):
    T = 1
    rec = records(T, B=1, v=np.array(v, float).reshape(1, 1, 3), d=np.array([[d]]),
                  n_hat=np.array(n_hat, float).reshape(1, 1, 3))
    return float(obstacle_terms(rec, barrier or BarrierParams())[0, 0])


def test_obstacle_term_zero_when_stationary_or_receding():
    for d in (0.2, 0.5, 2.0):
        assert _obstacle_case(d, (0, 0, 0)) == 0.0
        assert _obstacle_case(d, (-2.0, 1.0, 0)) == 0.0


def test_truncation_boundary():
    bp = BarrierParams()
    d = bp.drone_radius + 1.0
    quad_only = _obstacle_case(d, (1.0, 0, 0))
    # only the barrier remains at d - r_q = 1
    assert quad_only == pytest.approx(bp.beta1 * np.log1p(np.exp(-bp.beta2)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 5.0))
def test_obstacle_term_monotone(d1, d2, speed):
    lo, hi = sorted((d1, d2))
    assert _obstacle_case(lo, (speed, 0, 0)) >= _obstacle_case(hi, (speed, 0, 0)) - 1e-12


def test_obstacle_gradient_points_away():
    tape = ad.Tape()
    p = tape.param("p", np.zeros((1, 1, 3)))
    rec = StepRecord(p, np.array([[[1.0, 0, 0]]]), np.zeros((1, 1, 3)), np.array([[0.4]]),
                     np.array([[[1.0, 0, 0]]]), np.zeros((1, 1, 3)))
    out = ad.sum(obstacle_terms(rec, BarrierParams()))
    tape.finalize()
    g = ad.backward(tape, out)["p"][0, 0]
    assert g[0] > 0 and g[1] == 0 and g[2] == 0  # descent moves away from the obstacle


def test_barrier_variants():
    literal = BarrierParams(barrier="literal")
    quad = BarrierParams(approach_scope="quadratic")
    assert _obstacle_case(5.0, (1.0, 0, 0), barrier=literal) > _obstacle_case(5.0, (1.0, 0, 0))
    assert _obstacle_case(0.3, (0, 0, 0), barrier=quad) > 0.0
    with pytest.raises(ObjectiveError):
        BarrierParams(barrier="x")
    with pytest.raises(ObjectiveError):
        BarrierParams(beta1=0.0)


def test_negative_distance_rejected():
    with pytest.raises(ObjectiveError):
        _obstacle_case(-0.1, (1, 0, 0))


# ----------------------------------------------------------------------------- smoothness and total

def test_smoothness_examples():
    a = np.tile([2.0, 0, 0], (10, 1, 1))
    la, lj = smoothness_losses(records(10, B=1, a=a), 0.1)
    assert float(la) == pytest.approx(4.0) and float(lj) == 0.0
    la, lj = smoothness_losses(records(10, B=1), 0.1)
    assert float(la) == 0.0 and float(lj) == 0.0
    alt = np.array([[[1.0, 0, 0]], [[-1.0, 0, 0]]] * 5)
    _, lj = smoothness_losses(records(10, B=1, a=alt), 0.1)
    assert float(lj) == pytest.approx(400.0, rel=1e-12)


def test_total_loss_examples():
    w = LossWeights()
    assert float(total_loss(1.0, 1.0, 1.0, 1.0, w)) == pytest.approx(3.011, abs=1e-12)
    assert float(total_loss(0.0, 0.0, 0.0, 0.0, w)) == 0.0
    assert float(total_loss(3.0, 1.0, 7.0, 2.0, LossWeights(0, 0, 0, 0))) == 0.0
    with pytest.raises(ObjectiveError, match="velocity"):
        total_loss(np.nan, 1.0, 1.0, 1.0, w)
    with pytest.raises(ObjectiveError):
        LossWeights(velocity=-1)


def test_step_costs_sum_to_weighted_losses():
    rng = np.random.default_rng(3)
    T, B = 9, 3
    rec = records(T, B, v=rng.normal(size=(T, B, 3)), vset=rng.normal(size=(T, B, 3)),
                  a=rng.normal(size=(T, B, 3)), d=rng.uniform(0.2, 2.0, size=(T, B)),
                  n_hat=rng.normal(size=(T, B, 3)))
    w, bp = LossWeights(), BarrierParams()
    costs = step_costs(rec, w, bp, DT)
    for lane in range(B):
        one = StepRecord(rec.p[:, lane:lane + 1], rec.v[:, lane:lane + 1], rec.a[:, lane:lane + 1],
                         rec.d[:, lane:lane + 1], rec.n_hat[:, lane:lane + 1], rec.vset[:, lane:lane + 1])
        lv = float(velocity_loss(one, DT))
        lc = float(ad.mean(obstacle_terms(one, bp)))
        la, lj = (float(x) for x in smoothness_losses(one, DT))
        expect = T * (w.velocity * lv + w.collision * lc + w.accel * la) + (T - 1) * w.jerk * lj
        assert costs[:, lane].sum() == pytest.approx(expect, rel=1e-12)


def test_velocity_estimate_loss():
    rec = records(4, B=1)
    with pytest.raises(ObjectiveError):
        velocity_estimate_loss(rec)
    rec.v_hat = np.ones((4, 1, 3))
    rec.v_obs = np.ones((4, 1, 3)) * 1.5
    assert float(velocity_estimate_loss(rec)) == pytest.approx(0.125)


def test_record_lengths_checked():
    with pytest.raises(ObjectiveError, match="length"):
        StepRecord(np.zeros((3, 1, 3)), np.zeros((2, 1, 3)), np.zeros((3, 1, 3)), np.zeros((3, 1)),
                   np.zeros((3, 1, 3)), np.zeros((3, 1, 3)))
