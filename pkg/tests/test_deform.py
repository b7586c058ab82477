import numpy as np
import pytest
from hypothesis import given, strategies as st

from deunet import deform, oracles, tensor
from deunet.errors import ConfigurationError, DimensionError
from deunet.tensor import check_gradient
from deunet.verify import lattice_free


def fb(forward, backward, n_grads):
    def f(*xs):
        y, cache = forward(*xs)
        return y, lambda g: backward(g, cache)[:n_grads]
    return f


# ---------------------------------------------------------------- bilinear_sample

def test_bilinear_lattice_point(rng):
    feat = rng.standard_normal((5, 6))
    assert deform.bilinear_sample(feat, 2.0, 3.0) == feat[2, 3]


def test_bilinear_midpoint():
    assert deform.bilinear_sample(np.array([[0.0, 1.0]]), 0.0, 0.5) == 0.5


def test_bilinear_outside_is_zero(rng):
    assert deform.bilinear_sample(rng.standard_normal((4, 4)), -5.0, -5.0) == 0.0


def test_bilinear_half_outside_fades_to_zero():
    # halfway between the last row and the zero padding
    assert deform.bilinear_sample(np.ones((3, 3)), 2.5, 1.0) == 0.5


def test_bilinear_gradient_right_continuous_at_lattice():
    feat = np.array([[0.0, 1.0, 5.0]])
    _, _, gx = deform.bilinear_sample_grad(feat, 0.0, 1.0)
    assert gx == 4.0  # slope of the segment to the right


@given(st.floats(-2, 7, allow_nan=False), st.floats(-2, 7, allow_nan=False))
def test_bilinear_agrees_with_oracle(y, x):
    feat = np.arange(30.0).reshape(5, 6) ** 0.5
    assert deform.bilinear_sample(feat, y, x) == pytest.approx(oracles._bilinear(feat, y, x), abs=1e-12)


# ---------------------------------------------------------------- deform_conv2d

def test_deform_zero_offsets_is_plain_conv(rng):
    x, w, b = rng.standard_normal((3, 7, 7)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    y = deform.deform_conv2d(x, np.zeros((18, 7, 7)), w, b)
    np.testing.assert_allclose(y, tensor.conv2d(x, w, b, 1, 1), atol=1e-10)


def test_deform_constant_field_is_offset_invariant(rng):
    x = np.full((2, 9, 9), 1.7)
    w = rng.standard_normal((2, 2, 3, 3))
    off = rng.uniform(-0.9, 0.9, (18, 9, 9))
    ref = deform.deform_conv2d(x, np.zeros_like(off), w)
    # offsets stay in-bounds away from the 2-pixel border
    np.testing.assert_allclose(deform.deform_conv2d(x, off, w)[:, 2:-2, 2:-2], ref[:, 2:-2, 2:-2], atol=1e-12)


def test_deform_unit_shift_is_shifted_conv(rng):
    x, w = rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    off = np.zeros((18, 6, 6))
    off[0::2] = 1.0  # dy = +1 for every tap
    shifted = np.zeros_like(x)
    shifted[:, :-1] = x[:, 1:]
    y = deform.deform_conv2d(x, off, w)
    ref = tensor.conv2d(shifted, w, None, 1, 1)
    # row 0 reads x[0] directly where the shifted image has padding
    np.testing.assert_allclose(y[:, 1:], ref[:, 1:], atol=1e-12)


@given(st.integers(0, 10_000))
def test_deform_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((2, 5, 5)), r.standard_normal((3, 2, 3, 3))
    off = r.uniform(-2.5, 2.5, (18, 5, 5))
    np.testing.assert_allclose(deform.deform_conv2d(x, off, w), oracles.deform_conv_loops(x, off, w), atol=1e-10)


def test_deform_linear_in_input_and_weight(rng):
    x1, x2 = rng.standard_normal((2, 2, 5, 5))
    w1, w2 = rng.standard_normal((2, 3, 2, 3, 3))
    off = rng.uniform(-1, 1, (18, 5, 5))
    dc = deform.deform_conv2d
    np.testing.assert_allclose(dc(2 * x1 - x2, off, w1), 2 * dc(x1, off, w1) - dc(x2, off, w1), atol=1e-10)
    np.testing.assert_allclose(dc(x1, off, w1 + w2), dc(x1, off, w1) + dc(x1, off, w2), atol=1e-10)


def test_deform_rejects_bad_offset_channels(rng):
    with pytest.raises(ConfigurationError):
        deform.deform_conv2d(np.zeros((2, 4, 4)), np.zeros((17, 4, 4)), np.zeros((1, 2, 3, 3)))


def test_deform_rejects_offset_size_mismatch():
    with pytest.raises(DimensionError):
        deform.deform_conv2d(np.zeros((2, 4, 4)), np.zeros((18, 5, 4)), np.zeros((1, 2, 3, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_deform_gradients(seed):
    r = np.random.default_rng(seed)
    f = fb(deform.deform_conv2d_forward, deform.deform_conv2d_backward, 4)
    inputs = [r.standard_normal((2, 5, 5)), lattice_free(r, (18, 5, 5)), r.standard_normal((2, 2, 3, 3)),
              r.standard_normal(2)]
    assert check_gradient(f, inputs, 1e-5, seed=seed) < 1e-4


def test_deform_batched_equals_per_sample(rng):
    x, w = rng.standard_normal((3, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))
    off = rng.uniform(-1, 1, (3, 18, 5, 5))
    y = deform.deform_conv2d(x, off, w)
    for i in range(3):
        np.testing.assert_allclose(y[i], deform.deform_conv2d(x[i], off[i], w), atol=1e-13)


# ---------------------------------------------------------------- temporal aggregation

def test_tdam_single_frame_is_deform_conv(rng):
    clip, w = rng.standard_normal((1, 6, 6)), rng.standard_normal((2, 1, 3, 3))
    off = np.zeros((18, 6, 6))
    np.testing.assert_allclose(deform.temporal_deform_agg_conv(clip, off, w), deform.deform_conv2d(clip, off, w),
                               atol=1e-13)


@given(st.integers(0, 10_000))
def test_tdam_zero_offsets_is_early_fusion(seed):
    r = np.random.default_rng(seed)
    clip, w = r.standard_normal((3, 8, 8)), r.standard_normal((4, 3, 3, 3))
    y = deform.temporal_deform_agg_conv(clip, np.zeros((54, 8, 8)), w)
    np.testing.assert_allclose(y, tensor.conv2d(clip, w, None, 1, 1), atol=1e-10)


def test_tdam_matches_loop_oracle(rng):
    clip, w = rng.standard_normal((3, 6, 6)), rng.standard_normal((2, 3, 3, 3))
    off = rng.uniform(-1.5, 1.5, (54, 6, 6))
    ref = oracles.deform_conv_loops(clip, off, w, groups=3)
    np.testing.assert_allclose(deform.temporal_deform_agg_conv(clip, off, w), ref, atol=1e-10)


def test_tdam_frames_use_their_own_offsets(rng):
    clip, w = rng.standard_normal((3, 6, 6)), rng.standard_normal((1, 3, 3, 3))
    off = np.zeros((54, 6, 6))
    off[18:36] = 0.7  # move only frame 1
    w_only0 = w.copy()
    w_only0[:, 1:] = 0
    base = deform.temporal_deform_agg_conv(clip, np.zeros_like(off), w_only0)
    np.testing.assert_array_equal(deform.temporal_deform_agg_conv(clip, off, w_only0), base)


def test_tdam_frame_count_mismatch(rng):
    with pytest.raises(ConfigurationError):
        deform.temporal_deform_agg_conv(np.zeros((3, 4, 4)), np.zeros((54, 4, 4)), np.zeros((1, 5, 3, 3)))
    with pytest.raises(ConfigurationError):
        deform.temporal_deform_agg_conv(np.zeros((3, 4, 4)), np.zeros((36, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_tdam_zero_upstream_gives_zero_gradients(rng):
    clip, w = rng.standard_normal((3, 6, 6)), rng.standard_normal((2, 3, 3, 3))
    y, cache = deform.temporal_deform_agg_conv_forward(clip, rng.uniform(-1, 1, (54, 6, 6)), w)
    for g in deform.temporal_deform_agg_conv_backward(np.zeros_like(y), cache):
        assert not np.any(g)


@pytest.mark.parametrize("seed", range(3))
def test_tdam_gradients_all_three_paths(seed):
    r = np.random.default_rng(seed)
    f = fb(deform.temporal_deform_agg_conv_forward, deform.temporal_deform_agg_conv_backward, 3)
    inputs = [r.standard_normal((3, 6, 6)), lattice_free(r, (54, 6, 6)), r.standard_normal((2, 3, 3, 3))]
    for i in range(3):
        assert check_gradient(f, inputs, 1e-5, seed=seed, wrt=[i]) < 1e-4


def test_output_size_preserved(rng):
    for H, W in [(4, 4), (5, 7), (9, 3)]:
        y = deform.temporal_deform_agg_conv(rng.standard_normal((3, H, W)), rng.standard_normal((54, H, W)),
                                            rng.standard_normal((2, 3, 3, 3)))
        assert y.shape == (2, H, W)
