import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from checkerboard.errors import ContractError, DimensionError, NumericError
from checkerboard.tensor import (
    Tensor,
    backward,
    concat,
    conv2d,
    conv2d_transposed,
    gaussian_interval,
    get_tape,
    grad_check,
    leaky_relu,
    lower_bound,
    no_grad,
    softmax,
    softplus,
    where,
)

from conftest import naive_conv2d


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


# conv2d ---------------------------------------------------------------------


def test_conv_full_overlap_centre_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1).data
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_conv_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-5)


def test_conv_one_by_one_matches_naive(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((4, 3, 1, 1))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data, naive_conv2d(x, w), atol=1e-5)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_rejects_too_small_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_conv_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 2, 6, 6))
    w = Tensor(r.standard_normal((3, 2, 3, 3)))
    lhs = conv2d(Tensor(a * x + b * y, dtype=np.float64), w, padding=1).data
    rhs = a * conv2d(f64(x), w, padding=1).data + b * conv2d(f64(y), w, padding=1).data
    scale = max(1.0, np.abs(rhs).max())
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * scale)


# conv2d_transposed ------------------------------------------------------------


def test_transposed_single_tap_broadcast():
    out = conv2d_transposed(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 3, 3))), stride=2).data
    np.testing.assert_array_equal(out, np.ones((1, 1, 3, 3)))


def test_transposed_size_formula():
    out = conv2d_transposed(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 1, 5, 5)


def test_transposed_output_padding_extends_bottom_right():
    x = Tensor(np.ones((1, 1, 2, 2)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d_transposed(x, w, stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 1, 4, 4)
    with pytest.raises(ContractError):
        conv2d_transposed(x, w, stride=2, output_padding=2)


@given(
    seed=st.integers(0, 2**31),
    stride=st.sampled_from([1, 2]),
    k=st.sampled_from([1, 3, 5]),
    size=st.integers(3, 7),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
)
def test_conv_transposed_adjoint(seed, stride, k, size, cin, cout):
    """<conv(x), y> == <x, conv_T(y)> with the same weight tensor."""
    r = np.random.default_rng(seed)
    pad = k // 2
    x = r.standard_normal((1, cin, size, size))
    w = r.standard_normal((cout, cin, k, k))
    y_shape = conv2d(f64(x), f64(w), stride=stride, padding=pad).shape
    y = r.standard_normal(y_shape)
    # conv2d_transposed takes (inC, outC, k, k) of its own direction
    out_pad = size - ((y_shape[-1] - 1) * stride - 2 * pad + k)
    xt = conv2d_transposed(f64(y), f64(w), stride=stride, padding=pad, output_padding=out_pad).data
    lhs = float(np.sum(conv2d(f64(x), f64(w), stride=stride, padding=pad).data * y))
    rhs = float(np.sum(x * xt))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# activations -----------------------------------------------------------------


def test_leaky_relu_values():
    np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.1).data, [-0.1, 0.0, 2.0], rtol=1e-6)
    np.testing.assert_array_equal(leaky_relu(Tensor([-3.0, 3.0]), 0.0).data, [0.0, 3.0])


def test_leaky_relu_gradient_negative_side():
    x = Tensor([-1.0], requires_grad=True)
    backward(leaky_relu(x, 0.1).sum())
    np.testing.assert_allclose(x.grad, [0.1], rtol=1e-6)


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ContractError):
        leaky_relu(Tensor([1.0]), 1.5)


def test_softplus_is_stable_for_large_inputs():
    out = softplus(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.0, np.log(2.0), 1000.0])


def test_softmax_sums_to_one(rng):
    out = softmax(Tensor(rng.standard_normal((3, 5)) * 50), axis=1).data
    np.testing.assert_allclose(out.sum(1), 1.0, rtol=1e-6)


def test_lower_bound_gradient_pushes_up_only():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True, dtype=np.float64)
    # loss decreasing in x: gradient is negative so it flows even below the bound
    backward((lower_bound(x, 1.0) * -1.0).sum())
    np.testing.assert_array_equal(x.grad, [-1.0, -1.0])
    x.grad = None
    backward(lower_bound(x, 1.0).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_gaussian_interval_standard_normal_centre():
    p = gaussian_interval(Tensor(0.0, dtype=np.float64), 0.0, 1.0).data
    assert abs(float(p) - 0.3829249225480262) < 1e-12


def test_gaussian_interval_tail_keeps_precision():
    import math

    got = gaussian_interval(f64([8.0, -8.0]), f64([0.0, 0.0]), f64([1.0, 1.0])).data
    want = 0.5 * (math.erfc(7.5 / math.sqrt(2)) - math.erfc(8.5 / math.sqrt(2)))
    np.testing.assert_allclose(got, [want, want], rtol=1e-9)


# backward ------------------------------------------------------------------------


def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_composite_conv_activation_matches_finite_differences(rng):
    x0 = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    err = grad_check(lambda x: leaky_relu(conv2d(x, f64(w), padding=1)).sum(), x0, eps=1e-3)
    assert err < 1e-3


def test_tape_is_topologically_ordered(rng):
    get_tape().clear()
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = (x * 2.0 + 1.0).square().sum()
    entries = get_tape().entries
    produced = {}
    for i, (out, inputs, _) in enumerate(entries):
        for node in inputs:
            if id(node) in produced:
                assert produced[id(node)] < i
        produced[id(out)] = i
    assert entries[-1][0] is y
    backward(y)
    assert len(get_tape()) == 0


def test_shared_node_gradient_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    backward(y.sum())
    np.testing.assert_array_equal(x.grad, [7.0])


def test_no_grad_records_nothing():
    get_tape().clear()
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        (x * 2).sum()
    assert len(get_tape()) == 0


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2)
    get_tape().clear()


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((2, 2, 3, 3))
    a = conv2d_transposed(conv2d(Tensor(x), Tensor(w), stride=2, padding=1), Tensor(w), stride=2, padding=1)
    b = conv2d_transposed(conv2d(Tensor(x), Tensor(w), stride=2, padding=1), Tensor(w), stride=2, padding=1)
    assert np.array_equal(a.data, b.data)


def test_float32_is_default_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


# grad_check -------------------------------------------------------------------


def test_grad_check_quadratic_is_exact():
    assert grad_check(lambda x: x.square().sum(), np.array([1.0, 2.0, 3.0]), eps=1e-3) < 1e-6


def test_grad_check_conv(rng):
    w = rng.standard_normal((2, 1, 3, 3))
    assert grad_check(lambda x: conv2d(x, f64(w), padding=1).square().sum(), rng.standard_normal((1, 1, 4, 4))) < 1e-3


def test_grad_check_constant_is_zero():
    assert grad_check(lambda x: x.sum() * 0.0 + 5.0, np.ones(3)) == 0.0


def test_grad_check_detects_wrong_rule():
    from checkerboard.tensor import _result

    def bad_square(x):
        data = x.data
        return _result(data * data, (x,), lambda g: (3.0 * g * data,))

    assert grad_check(lambda x: bad_square(x).sum(), np.array([1.0, -2.0])) > 0.4


def test_grad_check_raises_on_non_finite():
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        grad_check(lambda x: x.log().sum(), np.array([-1.0]))


OPS = {
    "add": lambda x: (x + x * 0.5).sum(),
    "sub": lambda x: (2.0 - x).square().sum(),
    "mul": lambda x: (x * x * x).sum(),
    "div": lambda x: (1.0 / (x.square() + 1.0)).sum(),
    "exp": lambda x: (x * 0.3).exp().sum(),
    "log": lambda x: (x.square() + 1.0).log().sum(),
    "abs": lambda x: (x.abs() * x).sum(),
    "mean": lambda x: x.square().mean(axis=1).sum(),
    "reshape_transpose": lambda x: (x.reshape(3, 2).transpose(1, 0) * f64([[1, 2, 3], [4, 5, 6]])).sum(),
    "getitem": lambda x: x[:, 1:].square().sum(),
    "leaky_relu": lambda x: leaky_relu(x * 3.0 + 0.05, 0.1).square().sum(),
    "softplus": lambda x: softplus(x).square().sum(),
    "softmax": lambda x: (softmax(x, axis=1) * f64([[1, 2, 3], [3, 1, 2]])).sum(),
    "concat": lambda x: concat([x, x.square()], axis=1).square().sum(),
    "where": lambda x: where(np.array([[True, False, True], [False, True, False]]), x.square(), x * 2.0).sum(),
    "lower_bound": lambda x: lower_bound(x + 3.0, 0.5).square().sum(),
    "gaussian_interval": lambda x: gaussian_interval(x, f64([[0.1, -0.2, 0.3]]), x.square() + 0.5).log().sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_op_gradients(name):
    r = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        point = r.uniform(-1.5, 1.5, size=(2, 3))
        assert grad_check(OPS[name], point, eps=(1e-4, 1e-5)) < 1e-3, name


def test_conv_transposed_gradients(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    x0 = rng.standard_normal((1, 2, 3, 3))
    f = lambda x: conv2d_transposed(x, f64(w), f64([0.1, 0.2, 0.3]), stride=2, padding=1, output_padding=1).square().sum()
    assert grad_check(f, x0, eps=1e-4) < 1e-3
    g = lambda wt: conv2d_transposed(f64(x0), wt, stride=2, padding=1, output_padding=1).square().sum()
    assert grad_check(g, w, eps=1e-4) < 1e-3
