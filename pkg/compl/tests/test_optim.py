import pytest
import numpy as np

from compl.autodiff import ShapeError
from compl.nn import ModelParams
from compl.optim import (OptimizerState, MissingGradientError, poly_lr,
                         sgd_step)


def _params(value):
    return ModelParams({"w": np.array([value])})


def test_poly_lr_endpoints():
    assert poly_lr(0, 1000, 0.01, 0.9) == 0.01
    assert poly_lr(1000, 1000, 0.01, 0.9) == 0.0


def test_poly_lr_midpoint():
    assert poly_lr(500, 1000, 0.01, 0.9) == pytest.approx(0.0053589, abs=1e-7)


def test_poly_lr_is_decreasing():
    rates = [poly_lr(i, 50, 0.1, 0.9) for i in range(51)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("iteration", [-1, 1001])
def test_poly_lr_rejects_out_of_range(iteration):
    with pytest.raises(ValueError):
        poly_lr(iteration, 1000, 0.01, 0.9)


def test_plain_gradient_step():
    params = _params(5.0)
    sgd_step(params, {"w": np.array([2.0])},
             OptimizerState(params),
             lr=1.0,
             momentum=0.0,
             weight_decay=0.0)
    assert params["w"][0] == 3.0


def test_weight_decay_step():
    params = _params(1.0)
    sgd_step(params, {"w": np.array([0.0])},
             OptimizerState(params),
             lr=1.0,
             momentum=0.0,
             weight_decay=0.1)
    assert params["w"][0] == pytest.approx(0.9)


def test_velocity_accumulates():
    params = _params(10.0)
    state = OptimizerState(params)
    values = [10.0]
    for _ in range(2):
        sgd_step(params, {"w": np.array([1.0])},
                 state,
                 lr=1.0,
                 momentum=0.9,
                 weight_decay=0.0)
        values.append(params["w"][0])
    assert values[0] - values[1] == pytest.approx(1.0)
    assert values[1] - values[2] == pytest.approx(1.9)
    assert state.iteration == 2


def test_parameters_without_gradient_are_untouched():
    params = ModelParams({"a": np.ones(2), "b": np.ones(2)})
    sgd_step(params, {"a": np.ones(2)}, OptimizerState(params), lr=0.5)
    np.testing.assert_array_equal(params["b"], np.ones(2))


def test_missing_gradient_for_touched_parameter():
    params = ModelParams({"a": np.ones(2), "b": np.ones(2)})
    with pytest.raises(MissingGradientError):
        sgd_step(params, {"a": np.ones(2)},
                 OptimizerState(params),
                 lr=0.5,
                 touched=["a", "b"])


def test_gradient_shape_mismatch():
    params = _params(1.0)
    with pytest.raises(ShapeError):
        sgd_step(params, {"w": np.ones(3)}, OptimizerState(params), lr=0.1)


def test_optimizer_state_round_trip():
    params = _params(2.0)
    state = OptimizerState(params)
    sgd_step(params, {"w": np.array([1.0])}, state, lr=0.1)
    restored = OptimizerState(params)
    restored.load_state_dict(state.state_dict())
    np.testing.assert_array_equal(restored.velocity["w"], state.velocity["w"])
    assert restored.iteration == 1
