import numpy as np
import pytest

from arflow.optim import Adam, AdamState, adam_step, clip_grad_norm
from arflow.tensor import Tensor, backward, mul, reset_tape, sub, sum_


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True, dtype=np.float64)
    optimizer = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        optimizer.zero_grad()
        d = sub(x, np.array([1.0, 1.0]))
        backward(sum_(mul(d, d)))
        optimizer.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-2)


def test_adam_first_step_is_lr_times_sign():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True, dtype=np.float64)
    x.grad = np.array([4.0, -0.5])
    state = adam_step({"x": x}, AdamState(lr=0.01))
    assert state.step == 1
    np.testing.assert_allclose(x.data, [0.99, 1.01], rtol=1e-6)


def test_adam_zeroes_gradients_after_update():
    x = Tensor(np.ones(2), requires_grad=True)
    x.grad = np.ones(2, dtype=np.float32)
    adam_step({"x": x}, AdamState())
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_adam_requires_gradients():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step({"x": x}, AdamState())


@pytest.mark.parametrize("max_norm, expected", [(None, 5.0), (10.0, 5.0), (1.0, 1.0)])
def test_clip_grad_norm(max_norm, expected):
    a, b = Tensor(np.zeros(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0], dtype=np.float32), np.array([4.0], dtype=np.float32)
    assert clip_grad_norm({"a": a, "b": b}, max_norm) == pytest.approx(5.0)
    norm = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
    assert norm == pytest.approx(expected, rel=1e-5)
