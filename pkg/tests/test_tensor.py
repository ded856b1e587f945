import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hcseg import tensor as T
from hcseg.tensor import Node, ShapeError, Tensor, _make, backward, gradcheck, high_precision, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_default_dtype_and_high_precision():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with high_precision():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_scalar_is_stored_as_shape_one():
    t = Tensor(3.0)
    assert t.shape == (1,)
    assert t.item() == 3.0


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0]), 0)


def test_log_is_clamped():
    out = T.log(Tensor(np.array([0.0, -1.0, 1.0])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(np.log(np.float32(1e-7)), rel=1e-6)
    with pytest.raises(ValueError):
        T.log(Tensor([1.0]), eps=0.0)


def test_sigmoid_extremes_are_finite():
    with high_precision():
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_backward_needs_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_gradient_accumulates_through_shared_node():
    # y = x*x + x uses x twice; dy/dx = 2x + 1
    x = leaf([1.0, -2.0, 3.0])
    T.sum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, [3.0, -3.0, 7.0])


def test_diamond_graph_accumulates():
    x = leaf([2.0])
    a = x * 3.0
    b = T.exp(x)
    (a * b).backward()
    np.testing.assert_allclose(x.grad, [3 * np.exp(2.0) + 6 * np.exp(2.0)])


def test_grads_accumulate_across_calls_until_zeroed():
    x = leaf([1.0, 2.0])
    T.sum(x).backward()
    T.sum(x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_reductions_and_axes():
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    np.testing.assert_array_equal(T.sum(Tensor(a), axes=(0, 2)).data, a.sum(axis=(0, 2)))
    np.testing.assert_allclose(T.mean(Tensor(a), axes=-1).data, a.mean(axis=-1))
    with pytest.raises(ShapeError):
        T.sum(Tensor(a), axes=3)
    with pytest.raises(ShapeError):
        T.sum(Tensor(a), axes=(1, 1))


def test_concat_and_slice_roundtrip():
    a, b = np.ones((1, 2, 3)), np.zeros((1, 4, 3))
    c = T.concat([Tensor(a), Tensor(b)], axis=1)
    assert c.shape == (1, 6, 3)
    np.testing.assert_array_equal(T.slice_axis(c, 2, 6, axis=1).data, b)


def test_gradcheck_detects_wrong_vjp():
    def bad_square(a):
        return _make(a.data**2, "bad", (a,), lambda g: (g * a.data,))  # missing factor 2

    with high_precision():
        x = leaf([0.5, 1.5, -2.0])
        assert gradcheck(lambda p: T.sum(bad_square(p)), x) > 0.4
        assert gradcheck(lambda p: T.sum(p * p), x) < 1e-8


def test_gradcheck_restores_point():
    with high_precision():
        x = leaf([0.3, 0.7])
        before = x.data.copy()
        gradcheck(lambda p: T.sum(T.exp(p)), x)
        np.testing.assert_array_equal(x.data, before)


def test_gradcheck_rejects_nonfinite():
    with high_precision():
        x = leaf([1.0])
        with pytest.raises(FloatingPointError):
            gradcheck(lambda p: T.div(p, 0.5) * np.inf, x)


floats = st.floats(-3.0, 3.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=floats), arrays(np.float64, (3, 4), elements=floats))
def test_elementwise_values_match_numpy(a, b):
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal(T.relu(ta).data, np.maximum(a, 0))
    np.testing.assert_allclose(T.sigmoid(ta).data, 1 / (1 + np.exp(-a)), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-2.0, 2.0)))
def test_sum_gradient_is_ones(a):
    x = leaf(a)
    T.sum(T.reshape(x, (5, 2))).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(a))
