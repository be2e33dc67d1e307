import numpy as np
import pytest

from percept_age.optim import AdamState, adam_step
from percept_age.tensor import ShapeError, Tensor


def test_zero_gradient_leaves_param():
    p = {"w": Tensor([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_first_step_size_is_lr():
    # bias correction makes the first step lr * g/|g|
    p = {"w": Tensor([0.0])}
    adam_step(p, {"w": np.array([0.5])}, AdamState(lr=0.1))
    assert p["w"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_quadratic_converges():
    p = {"w": Tensor([0.0])}
    state = AdamState(lr=0.01)
    for _ in range(5000):
        adam_step(p, {"w": 2 * (p["w"].data - 3.0)}, state)
    assert abs(p["w"].data[0] - 3.0) < 1e-3


def test_missing_grad_means_frozen():
    p = {"a": Tensor([1.0]), "b": Tensor([1.0])}
    adam_step(p, {"a": np.array([1.0])}, AdamState(lr=0.1))
    assert p["b"].data[0] == 1.0 and p["a"].data[0] != 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": Tensor([1.0, 2.0])}, {"w": np.ones(3)}, AdamState(lr=0.1))
