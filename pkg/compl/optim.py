"""
SGD with momentum and weight decay under the poly learning-rate schedule
"""

from __future__ import annotations
from typing import Iterable, Mapping, Optional

import logging

import numpy as np

from .autodiff import GradMap, ShapeError
from .nn import ModelParams

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()


class MissingGradientError(KeyError):
    """Raised when a parameter touched by a step has no gradient"""
    pass


def poly_lr(iteration: int, max_iters: int, base_lr: float,
            power: float) -> float:
    '''
    base_lr * (1 - iteration / max_iters) ** power

    Raises:
        ValueError: If iteration lies outside [0, max_iters]
    '''
    if max_iters < 1 or not 0 <= iteration <= max_iters:
        raise ValueError(f"Iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters)**power


class OptimizerState(object):
    '''
    Attributes:
        velocity: Momentum buffer per parameter, zero until first updated
        iteration: Number of steps taken
    '''
    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None):
        self.velocity = ModelParams(
            {k: np.zeros_like(v)
             for k, v in (params or {}).items()})
        self.iteration = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"velocity.{k}": v.copy() for k, v in self.velocity.items()}
        state["optimizer.iteration"] = np.array([self.iteration])
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.velocity:
            value = np.asarray(state[f"velocity.{k}"])
            if value.shape != self.velocity[k].shape:
                raise ShapeError(f"Velocity {k} has shape {value.shape}, "
                                 f"expected {self.velocity[k].shape}")
            self.velocity[k] = value
        self.iteration = int(state["optimizer.iteration"][0])


def sgd_step(params: ModelParams,
             grads: GradMap,
             state: OptimizerState,
             lr: float,
             momentum: float = 0.9,
             weight_decay: float = 1e-4,
             touched: Optional[Iterable[str]] = None) -> ModelParams:
    '''
    In-place update of every parameter holding a gradient

        g' = g + wd * theta;  v = mu * v + g';  theta = theta - lr * v

    Args:
        params: Parameters to update
        grads: Gradients keyed by parameter name
        state: Momentum buffers, updated in place
        lr: Learning rate of this step
        momentum: mu
        weight_decay: wd
        touched: Names used by the step's forward passes; each must have a
            gradient

    Raises:
        MissingGradientError: If a touched parameter has no gradient
        ShapeError: If a gradient is not congruent with its parameter
    '''
    missing = sorted(set(touched or ()) - set(grads))
    if missing:
        logger.error(f"No gradient for {missing}")
        raise MissingGradientError(missing[0])

    for name, grad in grads.items():
        g = grad.data if hasattr(grad, "data") else np.asarray(grad)
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"Gradient of {name} has shape {g.shape}, "
                             f"parameter {theta.shape}")
        if name not in state.velocity:
            state.velocity[name] = np.zeros_like(theta)
        v = momentum * state.velocity[name] + (g + weight_decay * theta)
        state.velocity[name] = v
        params[name] = theta - lr * v
    state.iteration += 1
    return params
