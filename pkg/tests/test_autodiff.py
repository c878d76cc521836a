import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hvdpo import autodiff as ad
from hvdpo.gradcheck import STEP, TOLERANCE, check_primitive


def test_softmax_uniform():
    out = ad.softmax(ad.as_value(np.zeros((1, 4), np.float32)))
    np.testing.assert_allclose(out.value, [[0.25] * 4], atol=1e-7)


def test_sigmoid_zero():
    assert ad.sigmoid(ad.as_value([0.0])).item() == 0.5


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2, dtype=np.float32)).value, a)


def test_squared_norm_by_hand():
    # oracle: hand summation 3*3 + 4*4
    assert ad.squared_norm(ad.as_value([3.0, 4.0])).item() == 25.0


def test_backward_sum_gives_ones():
    x = ad.parameter(np.random.default_rng(0).uniform(-1, 1, (3, 2, 5)))
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2, 5)))


def test_backward_squared_norm():
    x = ad.parameter(np.array([1.0, 2.0]))
    table = ad.backward(ad.squared_norm(x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    np.testing.assert_allclose(table[id(x)], [2.0, 4.0])


def test_backward_neg_log_sigmoid_matches_scalar_fd():
    # independent oracle: central difference on plain python floats
    f = lambda w: -math.log(1.0 / (1.0 + math.exp(-w)))
    h = 1e-4
    expected = (f(0.6 + h) - f(0.6 - h)) / (2 * h)
    assert expected == pytest.approx(-0.3543, abs=1e-4)
    w = ad.parameter(np.array([0.6]))
    ad.backward(ad.scale(ad.log(ad.sigmoid(w)), -1.0))
    assert w.grad[0] == pytest.approx(expected, abs=1e-7)


def test_fd_exact_for_sum():
    x = np.random.default_rng(1).uniform(-1, 1, (4, 3))
    g = ad.finite_difference_gradient(lambda v: v.sum(), x, 1e-3)
    np.testing.assert_allclose(g, np.ones_like(x), atol=1e-8)


def test_fd_squared_norm():
    g = ad.finite_difference_gradient(lambda v: float((v * v).sum()), np.array([1.0, 2.0]), 1e-4)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


def test_fd_non_finite_raises():
    with pytest.raises(FloatingPointError):
        ad.finite_difference_gradient(lambda v: float("nan"), np.zeros(2))


@pytest.mark.parametrize("kind", list(ad.PRIMITIVES))
def test_primitive_gradients(kind):
    res = check_primitive(kind, seed=11, instances=5)
    assert res.max_rel_error < TOLERANCE, res


def test_backward_accumulates_fan_out():
    x = ad.parameter(np.array([1.5, -2.0]))
    y = ad.add(ad.multiply(x, x), ad.scale(x, 3.0))
    ad.backward(ad.sum_all(y))
    np.testing.assert_allclose(x.grad, 2 * np.array([1.5, -2.0]) + 3.0)


def test_diamond_graph_visits_once():
    x = ad.parameter(np.array([0.3]))
    s = ad.sigmoid(x)
    y = ad.multiply(s, s)
    ad.backward(ad.sum_all(y))
    sig = 1 / (1 + math.exp(-0.3))
    assert x.grad[0] == pytest.approx(2 * sig * sig * (1 - sig), rel=1e-12)


def test_non_scalar_root_fails():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(ad.parameter(np.ones(3)), 2.0))


@pytest.mark.parametrize(
    "kind,a,b",
    [
        ("add", np.ones((2, 3)), np.ones((3, 2))),
        ("multiply", np.ones((2, 3)), np.ones((2, 4))),
        ("matmul", np.ones((2, 3)), np.ones((2, 3))),
    ],
)
def test_shape_error_names_primitive_and_shapes(kind, a, b):
    with pytest.raises(ad.ShapeError) as err:
        ad.apply_primitive(kind, ad.as_value(a), ad.as_value(b))
    msg = str(err.value)
    assert kind in msg and str(a.shape) in msg and str(b.shape) in msg


def test_conv_shape_error():
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 5, 3, 3)))


def test_log_non_positive_fails():
    with pytest.raises(ValueError, match="log"):
        ad.log(ad.as_value([1.0, 0.0]))
    with pytest.raises(ValueError):
        ad.log(ad.as_value([-1.0]))


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.apply_primitive("tanh", ad.as_value([1.0]))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 3, 5, 4))
    w = rng.uniform(-1, 1, (2, 3, 3, 3))
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = (pad[n, :, i : i + 3, j : j + 3] * w[o]).sum()
    np.testing.assert_allclose(ad.conv2d(x, w).value, ref, atol=1e-12)


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.multiply(x, x)
    assert not y.requires_grad and y.parents == ()


def test_float32_preserved():
    x = ad.parameter(np.ones((2, 2), np.float32))
    y = ad.matmul(x, np.ones((2, 2)))
    assert y.dtype == np.float32


_mats = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30))


@settings(max_examples=50, deadline=None)
@given(_mats)
def test_softmax_rows_are_distributions(x):
    out = ad.softmax(ad.as_value(x)).value
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(_mats, _mats, st.integers(0, 1))
def test_concatenate_then_split_is_identity(a, b, axis):
    other = 1 - axis
    if a.shape[other] != b.shape[other]:
        b = np.resize(b, tuple(a.shape[other] if d == other else b.shape[d] for d in range(2)))
    cat = ad.concatenate([ad.as_value(a), ad.as_value(b)], axis=axis)
    n = a.shape[axis]
    np.testing.assert_array_equal(ad.take(cat, 0, n, axis=axis).value, a)
    np.testing.assert_array_equal(ad.take(cat, n, cat.shape[axis], axis=axis).value, b)


def test_gradcheck_constants():
    assert TOLERANCE == 1e-4 and STEP == 1e-4
