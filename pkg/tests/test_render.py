import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from newtonfly import kernels
from newtonfly.dynamics import GRAVITY, attitude_from_thrust
from newtonfly.geometry import EnvSpec, Plane, Sphere, World, generate_env, pack
from newtonfly.render import (CameraIntrinsics, NoiseModel, pixel_directions, preprocess, render_batch,
                              render_depth, write_pgm)

CAM = CameraIntrinsics()
HOVER_X = attitude_from_thrust(np.array([0, 0, GRAVITY]), np.array([1.0, 0, 0]))


def world_of(*prims):
    return World(prims, (-50, -50, -1), (50, 50, 20), (0, 0, 1), (1, 0, 1))


def test_empty_world_reads_max_depth():
    img = render_depth(world_of(), [], (0, 0, 1), HOVER_X)
    assert img.shape == (48, 64)
    assert np.all(img == CAM.max_depth)
    np.testing.assert_allclose(preprocess(img), 0.03, rtol=0, atol=1e-15)


def test_fronto_parallel_wall_has_constant_z_depth():
    img = render_depth(world_of(Plane((5, 0, 0), (-1, 0, 0))), [], (0, 0, 1), HOVER_X)
    np.testing.assert_allclose(img, 5.0, atol=1e-6)


def test_sphere_ahead_and_other_agents_are_visible():
    img = render_depth(world_of(Sphere((3, 0, 1), 1.0)), [], (0, 0, 1), HOVER_X)
    assert img.min() == pytest.approx(2.0, abs=2e-3)
    img2 = render_depth(world_of(), [((2.0, 0.0, 1.0), 0.3)], (0, 0, 1), HOVER_X)
    assert img2.min() == pytest.approx(1.7, abs=2e-3)


def test_depth_clamped_to_range():
    img = render_depth(world_of(Sphere((0.5, 0, 1), 0.3)), [], (0, 0, 1), HOVER_X)
    assert img.min() >= CAM.min_depth and img.max() <= CAM.max_depth
    assert img.min() == CAM.min_depth


def test_pixel_directions_are_unit_and_forward():
    d = pixel_directions(CAM)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert np.all(d[:, 0] > 0)
    # top-left pixel looks left and up
    assert d[0, 1] > 0 and d[0, 2] > 0


def test_single_near_pixel_lights_one_cell():
    depth = np.full((48, 64), CAM.max_depth)
    depth[17, 42] = CAM.min_depth
    out = preprocess(depth)
    assert out.shape == (12, 16)
    assert np.sum(out == 1.0) == 1 and out[17 // 4, 42 // 4] == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (48, 64), elements=st.floats(0.0, 20.0)), st.integers(0, 2**32 - 1))
def test_pooling_is_invariant_to_permutation_within_blocks(depth, seed):
    rng = np.random.default_rng(seed)
    blocks = depth.reshape(12, 4, 16, 4).transpose(0, 2, 1, 3).reshape(12, 16, 16)
    shuffled = np.take_along_axis(blocks, rng.permuted(np.tile(np.arange(16), (12, 16, 1)), axis=-1), axis=-1)
    back = shuffled.reshape(12, 16, 4, 4).transpose(0, 2, 1, 3).reshape(48, 64)
    np.testing.assert_array_equal(preprocess(back), preprocess(depth))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (48, 64), elements=st.floats(0.0, 20.0)),
       arrays(np.float64, (48, 64), elements=st.floats(0.0, 5.0)))
def test_nearer_depth_never_lowers_output(depth, delta):
    out_near, out_far = preprocess(depth), preprocess(depth + delta)
    assert np.all(out_near >= out_far)
    assert np.all((out_far > 0) & (out_near <= 1))


def test_noise_is_seed_deterministic():
    depth = np.linspace(0.1, 12, 48 * 64).reshape(48, 64)
    a = preprocess(depth, noise=NoiseModel(), rng=np.random.default_rng(4))
    b = preprocess(depth, noise=NoiseModel(), rng=np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, preprocess(depth))
    with pytest.raises(ValueError):
        preprocess(depth, noise=NoiseModel())


def test_invalid_intrinsics_rejected():
    with pytest.raises(ValueError):
        CameraIntrinsics(min_depth=2.0, max_depth=1.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(width=66)


def test_write_pgm(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    write_pgm(tmp_path / "a.pgm", img, 0.0, 1.0)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [0, 128, 255, 255]


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled extension not built")
def test_render_backends_agree():
    w = generate_env(EnvSpec(obstacle_count=(10, 10), arena_size=(20, 20, 8), goal_distance=(8, 14), seed=2))
    table = pack(w.primitives)
    pos = np.array([w.start, w.goal])
    axes = np.stack([HOVER_X.axes()] * 2)
    off = np.array([0, len(table), 2 * len(table)])
    t2 = np.concatenate([table, table])
    a = kernels.render(t2, off, pos, axes, pixel_directions(CAM), backend="compiled")
    b = kernels.render(t2, off, pos, axes, pixel_directions(CAM), backend="python")
    np.testing.assert_allclose(a, b, atol=1e-12)
    imgs = render_batch(t2, off, pos, axes, CAM)
    assert imgs.shape == (2, 48, 64)
