import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrcaps import tensor as T
from icrcaps.gradcheck import gradcheck

from gradcases import PRIMITIVES, primitive_error
from icrcaps.tensor import GradTape, NonFiniteError, TapeError, Tensor


def test_elementwise_examples():
    np.testing.assert_array_equal(T.add(T.tensor([1, 2]), T.tensor([3, 4])).data, [4, 6])
    x = T.tensor([[0.5, -2.0], [3.0, 1.5]])
    np.testing.assert_array_equal(T.mul(x, T.ones(x.shape)).data, x.data)
    np.testing.assert_array_equal(T.relu(T.tensor([-1, 2])).data, [0, 2])
    np.testing.assert_array_equal(T.elementwise("sub", T.tensor([5.0]), T.tensor([2.0])).data, [3.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        T.add(T.zeros((2,)), T.zeros((3,)))
    with pytest.raises(ValueError):
        T.elementwise("nope", T.zeros((2,)))


def test_reduce_examples():
    a = T.tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.reduce("sum", a, 1).data, [3, 7])
    assert T.reduce("mean", T.tensor([2, 4, 6])).item() == 4
    np.testing.assert_array_equal(T.reduce("max", T.tensor([[1, 5], [7, 2]]), 0).data, [7, 5])


def test_reduce_empty_extent():
    with pytest.raises(ValueError, match="empty"):
        T.sum(T.zeros((0, 3)), 0)
    with pytest.raises(ValueError):
        T.mean(T.zeros((2, 0)), 1)


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = T.sum(T.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_constant_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(3.0)
    with GradTape() as tape:
        loss = T.add(T.scale(T.sum(x), 0.0), c)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = T.mul(x, x)
        loss = T.sum(y)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(loss)


def test_no_tape_means_no_record():
    x = Tensor([1.0], requires_grad=True)
    loss = T.sum(x)
    with pytest.raises(TapeError):
        loss.backward()


def test_max_ties_route_to_first():
    x = Tensor([[3.0, 1.0, 3.0], [2.0, 2.0, 2.0]], requires_grad=True)
    with GradTape() as tape:
        loss = T.sum(T.max(x, 1))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1, 0, 0], [1, 0, 0]])


def test_nonfinite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(T.tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        T.div(T.tensor([1.0]), T.tensor([0.0]))


def test_tape_replays_in_reverse_order_once():
    x = Tensor(np.arange(3.0) + 1, requires_grad=True)
    with GradTape() as tape:
        a = T.exp(x)
        b = T.square(a)
        loss = T.sum(b)
    order = []
    tape.backward(loss, visit=lambda t: order.append(id(t)))
    assert order == [id(loss), id(b), id(a)]


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with GradTape() as tape:
            loss = T.sum(T.scale(x, 3.0))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def l1():
        return T.sum(T.exp(T.scale(x, 0.5)))

    def l2():
        return T.mean(T.square(x))

    def grad_of(fn):
        x.grad = None
        with GradTape() as tape:
            loss = fn()
        tape.backward(loss)
        return x.grad.copy()

    with T.precision(np.float64):
        x.data = x.data.astype(np.float64)
        g_sum = grad_of(lambda: T.add(l1(), l2()))
        np.testing.assert_allclose(g_sum, grad_of(l1) + grad_of(l2), rtol=1e-12)


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    assert primitive_error(name) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=200))
def test_sum_matches_scalar_arithmetic(values):
    with T.precision(np.float64):
        got = T.sum(T.tensor(values)).item()
    expected = float(np.sum(np.asarray(values, dtype=np.float64)))
    assert abs(got - expected) <= 1e-10 * max(1.0, sum(abs(v) for v in values))


def test_sum_large_tensor_relative_accuracy():
    rng = np.random.default_rng(0)
    vals = rng.uniform(0, 1, size=10_000)
    got = T.sum(Tensor(vals, dtype=np.float64)).item()
    assert abs(got - np.sum(vals)) <= 1e-10 * abs(np.sum(vals))
