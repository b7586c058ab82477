import numpy as np
import pytest
from hypothesis import given, strategies as st

from deunet import oracles, tensor
from deunet.errors import ConfigurationError, DimensionError, GradientCheckError
from deunet.tensor import Parameter, check_gradient


def fb(forward, backward):
    """check_gradient callback from a forward/backward pair."""
    def f(*xs):
        y, cache = forward(*xs)
        return y, lambda g: backward(g, cache)
    return f


# ---------------------------------------------------------------- conv2d

def test_conv_ones_overlap_counts():
    y = tensor.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), None, 1, 1)
    assert y[0, 1, 1] == 9.0
    assert y[0, 0, 0] == y[0, 0, 2] == y[0, 2, 0] == y[0, 2, 2] == 4.0
    assert y[0, 0, 1] == 6.0


@pytest.mark.parametrize("S", [1, 3, 5])
def test_conv_dirac_kernel_is_identity(rng, S):
    x = rng.standard_normal((3, 7, 6))
    w = np.zeros((3, 3, S, S))
    for c in range(3):
        w[c, c, S // 2, S // 2] = 1.0
    np.testing.assert_array_equal(tensor.conv2d(x, w, None, 1, (S - 1) // 2), x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    y = tensor.conv2d(x, w, b, stride, padding)
    ref = oracles.conv2d_direct(x, w, b, stride, padding)
    side = (5 + 2 * padding - 3) // stride + 1
    assert y.shape == ref.shape == (3, side, side)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((4, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    y = tensor.conv2d(x, w, None, 1, 1)
    for i in range(4):
        np.testing.assert_array_equal(y[i], tensor.conv2d(x[i], w, None, 1, 1))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        tensor.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_input(seed, a, b):
    r = np.random.default_rng(seed)
    x, z = r.standard_normal((2, 2, 5, 5))
    w = r.standard_normal((2, 2, 3, 3))
    lhs = tensor.conv2d(a * x + b * z, w, None, 1, 1)
    rhs = a * tensor.conv2d(x, w, None, 1, 1) + b * tensor.conv2d(z, w, None, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_gradient_small_case(rng):
    x, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    f = fb(lambda x, w: tensor.conv2d_forward(x, w, None, 1, 1), lambda g, c: tensor.conv2d_backward(g, c)[:2])
    assert check_gradient(f, [x, w], 1e-5) < 1e-5


# ---------------------------------------------------------------- maxpool

def test_maxpool_window_max():
    y, _ = tensor.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    assert y.tolist() == [[[4.0]]]


def test_maxpool_ties_route_to_first():
    x = np.full((1, 4, 4), 2.5)
    y, cache = tensor.maxpool2d_forward(x, 2)
    np.testing.assert_array_equal(y, np.full((1, 2, 2), 2.5))
    dx = tensor.maxpool2d_backward(np.ones_like(y), cache)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(dx, expected)


def test_maxpool_matches_window_oracle(rng):
    x = rng.standard_normal((4, 8, 8))
    np.testing.assert_array_equal(tensor.maxpool2d(x, 2)[0], oracles.maxpool_windows(x, 2))


def test_maxpool_indivisible():
    with pytest.raises(DimensionError):
        tensor.maxpool2d(np.zeros((1, 5, 4)), 2)


@given(st.integers(0, 10_000))
def test_maxpool_gradient_mass_conserved(seed):
    r = np.random.default_rng(seed)
    x = r.integers(-2, 3, (2, 6, 6)).astype(float)  # plenty of ties
    y, cache = tensor.maxpool2d_forward(x, 2)
    g = r.standard_normal(y.shape)
    dx = tensor.maxpool2d_backward(g, cache)
    assert np.isclose(dx.sum(), g.sum())
    assert np.count_nonzero(dx) <= y.size


# ---------------------------------------------------------------- deconv

def test_deconv_broadcast_case():
    y = tensor.deconv2d(np.array([[[1.5]]]), np.ones((1, 1, 2, 2)), None, 2)
    np.testing.assert_array_equal(y, np.full((1, 2, 2), 1.5))


def test_deconv_zero_input(rng):
    y = tensor.deconv2d(np.zeros((3, 4, 4)), rng.standard_normal((3, 2, 2, 2)), None, 2)
    assert y.shape == (2, 8, 8) and not y.any()


def test_deconv_stride_must_equal_kernel():
    with pytest.raises(ConfigurationError):
        tensor.deconv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), None, 2)


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_deconv_is_conv_input_gradient(seed, k):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 4, 4))
    w = r.standard_normal((3, 2, k, k))  # [Cin, Cout, k, k]
    y = tensor.deconv2d(x, w, None, k)
    # the same kernel read as a conv [Cout_conv=3, Cin_conv=2] with stride k
    _, cache = tensor.conv2d_forward(np.zeros((2, 4 * k, 4 * k)), w, None, k, 0)
    dx = tensor.conv2d_backward(x, cache)[0]
    np.testing.assert_allclose(y, dx, atol=1e-10)


# ---------------------------------------------------------------- matmul

def test_matmul_hand_case():
    assert tensor.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]])).tolist() == [[3.0], [7.0]]


def test_matmul_identity(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(tensor.matmul(np.eye(4), x), x)


def test_matmul_matches_loops(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(tensor.matmul(a, b), oracles.matmul_loops(a, b), atol=1e-12)


def test_matmul_mismatch():
    with pytest.raises(DimensionError):
        tensor.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(tensor.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3])


def test_softmax_large_logits_do_not_overflow():
    p = tensor.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_normalized_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).standard_normal((4, 6)) * 5
    p = tensor.softmax_rows(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(tensor.softmax_rows(x + shift), p, atol=1e-12)


def test_softmax_gradient(rng):
    f = fb(tensor.softmax_rows_forward, lambda g, c: (tensor.softmax_rows_backward(g, c),))
    assert check_gradient(f, [rng.standard_normal((3, 4))], 1e-5) < 1e-6


# ---------------------------------------------------------------- relu / parameter

def test_relu_and_its_gradient_mask():
    x = np.array([-1.0, 0.0, 2.0])
    y, cache = tensor.relu_forward(x)
    assert y.tolist() == [0.0, 0.0, 2.0]
    assert tensor.relu_backward(np.ones(3), cache).tolist() == [0.0, 0.0, 1.0]


def test_parameter_zero_grad():
    p = Parameter("w", np.ones((2, 3)))
    assert p.grad.shape == p.value.shape
    p.grad += 5
    p.zero_grad()
    assert not p.grad.any()


# ---------------------------------------------------------------- check_gradient

def test_check_gradient_linear_map_is_exact(rng):
    A = rng.standard_normal((4, 5))
    f = lambda x: (A @ x, lambda g: (A.T @ g,))
    assert check_gradient(f, [rng.standard_normal(5)], 1e-5) < 1e-9


def test_check_gradient_flags_wrong_backward(rng):
    f = lambda x: (x ** 2, lambda g: (g * x,))  # missing factor 2
    assert check_gradient(f, [rng.standard_normal(4) + 3], 1e-5) > 0.3


def test_check_gradient_rejects_eps_out_of_range():
    f = lambda x: (x, lambda g: (g,))
    for eps in (1e-8, 1e-3):
        with pytest.raises(ConfigurationError):
            check_gradient(f, [np.ones(2)], eps)


def test_check_gradient_names_nonfinite_component():
    f = lambda x: (np.sqrt(x), lambda g: (g / (2 * np.sqrt(x)),))
    with np.errstate(all="ignore"):
        with pytest.raises(GradientCheckError, match=r"component \(1,\)"):
            check_gradient(f, [np.array([1.0, -1.0])], 1e-5)
        with pytest.raises(GradientCheckError, match=r"input 0, component \(0,\)"):
            check_gradient(f, [np.array([0.0, 1.0])], 1e-5)


def test_refine_kinks_resolves_relu_kink_inside_step():
    x = np.array([2e-6, 1.0])  # first entry sits 2e-6 from the ReLU kink
    f = lambda x: (np.maximum(x, 0), lambda g: (g * (x > 0),))
    assert check_gradient(f, [x], 1e-5) > 0.1
    assert check_gradient(f, [x], 1e-5, refine_kinks=True) < 1e-9


def test_refine_kinks_still_flags_wrong_backward():
    x = np.array([2e-6, 1.0, -0.5])
    f = lambda x: (3 * np.maximum(x, 0), lambda g: (g * (x > 0),))  # missing the factor 3
    assert check_gradient(f, [x], 1e-5, refine_kinks=True) > 0.5
