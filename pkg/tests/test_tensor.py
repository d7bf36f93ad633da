import numpy as np
import pytest

from cardseg import errors
from cardseg.tensor import (
    DIV_EPSILON,
    Tape,
    Tensor,
    backward,
    elementwise_binary,
    grad_check,
    reduce_sum,
)


def test_elementwise_add_basic():
    out = elementwise_binary(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), "add")
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_add_zeros_identity():
    x = Tensor([1.5, -2.0, 0.25])
    out = x + Tensor(np.zeros(3))
    np.testing.assert_array_equal(out.data, x.data)


def test_mul_scalar_broadcast():
    out = Tensor([2.0, 3.0]) * 0.5
    np.testing.assert_allclose(out.data, [1.0, 1.5])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_broadcast_matches_scalar_loop(kind, rng):
    a = rng.uniform(0.5, 2.0, size=(3, 4, 5))
    b = rng.uniform(0.5, 2.0, size=(5,))
    out = elementwise_binary(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), kind)
    py = {"add": lambda p, q: p + q, "sub": lambda p, q: p - q,
          "mul": lambda p, q: p * q, "div": lambda p, q: p / q}[kind]
    for i in range(3):
        for j in range(4):
            for k in range(5):
                assert out.data[i, j, k] == pytest.approx(py(a[i, j, k], b[k]), rel=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(errors.ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    # broadcasting must go into the first operand, not enlarge it
    with pytest.raises(errors.ShapeMismatch):
        Tensor(np.ones(3)) + Tensor(np.ones((2, 3)))


def test_division_guard():
    with pytest.raises(errors.DivisionDomain):
        Tensor([1.0]) / Tensor([DIV_EPSILON / 2])


def test_reduce_sum_all_axes():
    out = reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes={0, 1})
    assert out.item() == 10.0


def test_reduce_sum_empty_axes_is_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert reduce_sum(x, axes=set()) is x


def test_reduce_sum_keepdims_counts():
    out = reduce_sum(Tensor(np.ones((2, 3, 4))), axes={1})
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out.data, np.full((2, 4), 3.0))


def test_reduce_sum_axis_out_of_range():
    with pytest.raises(errors.AxisOutOfRange):
        reduce_sum(Tensor(np.ones((2, 2))), axes={2})


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    grads = backward(tape, y)
    np.testing.assert_allclose(grads[x], [2.0, 4.0, 6.0])
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    with Tape() as tape:
        y = x.sum()
    grads = tape.backward(y)
    np.testing.assert_array_equal(grads[x], np.ones((4, 5)))


def test_backward_accumulates_fanout():
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        y = (x + x).sum()
    grads = tape.backward(y)
    np.testing.assert_array_equal(grads[x], [2.0, 2.0])


def test_backward_nonscalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x + x
    with pytest.raises(errors.NonScalarRoot):
        tape.backward(y)


def test_backward_broadcast_unbroadcasts():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.full(3, 2.0), requires_grad=True)
    with Tape() as tape:
        y = (a * b).sum()
    grads = tape.backward(y)
    np.testing.assert_array_equal(grads[a], np.full((2, 3), 2.0))
    np.testing.assert_array_equal(grads[b], np.full(3, 2.0))


def test_grad_check_linear_is_exact(rng):
    x = Tensor(rng.normal(size=(7,)), dtype=np.float64)
    err = grad_check(lambda t: t.sum(), x)
    assert err < 1e-10


def test_grad_check_square(rng):
    x = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)), dtype=np.float64)
    err = grad_check(lambda t: (t * t).sum(), x)
    assert err < 1e-6


def test_grad_check_div(rng):
    denom = Tensor(rng.uniform(1.0, 2.0, size=(6,)), dtype=np.float64)
    x = Tensor(rng.uniform(-1.0, 1.0, size=(6,)), dtype=np.float64)
    err = grad_check(lambda t: (t / denom).sum(), x)
    assert err < 1e-6


def test_grad_check_requires_float64():
    with pytest.raises(errors.NonFiniteEvaluation):
        grad_check(lambda t: t.sum(), Tensor(np.ones(3, dtype=np.float32)))


def test_forward_determinism(rng):
    a = rng.normal(size=(8, 8)).astype(np.float32)
    b = rng.normal(size=(8, 8)).astype(np.float32)
    r1 = (Tensor(a) * Tensor(b) + Tensor(a)).data
    r2 = (Tensor(a) * Tensor(b) + Tensor(a)).data
    assert np.array_equal(r1, r2)
