'''
Module containing the contrastive loss, the momentum encoder update and
the base and mixin classes shared by auxiliary methods
'''

from __future__ import annotations
from typing import Mapping, MutableMapping, Optional, Union

import logging
from dataclasses import dataclass

import attr
import numpy as np

from ..autodiff import (Op, Tensor, ShapeError, register_op, apply_op)
from ..augment import CropGeometry
from ..nn import ConstView, ModelParams, TrunkModel
from .queue import MemoryQueue

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()


@register_op("info_nce")
class _InfoNCE(Op):
    @staticmethod
    def forward(ctx, pos, neg, tau):
        if pos.ndim != 1 or neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
            raise ShapeError(f"info_nce of s+ {pos.shape} and s- {neg.shape}")
        logits = np.concatenate([pos[:, None], neg], axis=1) / tau
        peak = logits.max(axis=1, keepdims=True)
        exps = np.exp(logits - peak)
        norm = exps.sum(axis=1, keepdims=True)
        lse = peak[:, 0] + np.log(norm[:, 0])
        ctx.probs, ctx.tau, ctx.n = exps / norm, tau, pos.shape[0]
        return (lse - logits[:, 0]).mean()

    @staticmethod
    def backward(ctx, grad):
        scale = grad / (ctx.tau * ctx.n)
        return (scale * (ctx.probs[:, 0] - 1.0), scale * ctx.probs[:, 1:])


def info_nce(pos_sim: Tensor, neg_sims: Tensor, tau: float) -> Tensor:
    '''
    InfoNCE over one positive and K negatives per query

    The softmax denominator includes the positive, so the loss equals
    ln(K + 1) when all similarities are equal.

    Args:
        pos_sim: [N] similarity of each query with its positive key
        neg_sims: [N, K] similarities with the negatives
        tau: Temperature

    Raises:
        ValueError: If tau is not positive
    '''
    if not tau > 0:
        logger.error(f"info_nce temperature {tau} is not positive")
        raise ValueError(f"Temperature must be positive, got {tau}")
    return apply_op("info_nce", pos_sim, neg_sims, tau=float(tau))


def contrastive_term(queries: Tensor, keys: np.ndarray, negatives: np.ndarray,
                     tau: float) -> Tensor:
    '''
    InfoNCE of unit queries [N, D] against their detached positive keys
    [N, D] and a bank of negatives [K, D]
    '''
    pos = (queries * Tensor(keys)).sum(axes=(1, ))
    neg = queries @ Tensor(np.ascontiguousarray(negatives.T))
    return info_nce(pos, neg, tau)


def momentum_update(key: MutableMapping[str, np.ndarray],
                    query: Mapping[str, np.ndarray],
                    m: float) -> MutableMapping[str, np.ndarray]:
    '''
    Exponential moving average of the key encoder towards the query
    encoder, theta_k = m * theta_k + (1 - m) * theta_q

    Raises:
        ValueError: If m is outside [0, 1)
        ShapeError: If a key parameter has no congruent query parameter
    '''
    if not 0.0 <= m < 1.0:
        raise ValueError(f"Momentum must lie in [0, 1), got {m}")
    for name in key:
        q = np.asarray(query[name])
        if q.shape != key[name].shape:
            logger.error(f"Momentum update shape mismatch on {name}")
            raise ShapeError(f"{name}: key {key[name].shape} vs "
                             f"query {q.shape}")
        key[name] = m * key[name] + (1.0 - m) * q
    return key


@attr.s(auto_attribs=True, frozen=True)
class AuxSettings(object):
    '''
    Hyperparameters shared by the auxiliary methods

    Attributes:
        feature_dim: Trunk output channels
        capacity: Memory queue size, the training-set size
        tau: InfoNCE temperature
        momentum: Key encoder EMA coefficient
        grid: DenseCL local pooling grid
        w_local: Weight of the DenseCL local term
        geom: SSL crop geometry
    '''
    feature_dim: int = 16
    capacity: int = 64
    tau: float = 0.2
    momentum: float = 0.999
    grid: int = 4
    w_local: float = 0.7
    geom: CropGeometry = CropGeometry()


@dataclass
class AuxBatch:
    '''
    Attributes:
        inputs: [B, 3, h, w] query views (rotated crops for rotation)
        ids: Dataset index of each image
        key_inputs: [B, 3, h, w] key views of contrastive methods
        labels: Rotation labels
    '''
    inputs: np.ndarray
    ids: np.ndarray
    key_inputs: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


class AuxiliaryMethod(object):
    '''
    Base class of a self-supervised auxiliary task

    Subclasses define the head, how a batch of raw images becomes an
    `AuxBatch` and the loss of that batch. The head is used only during
    training.
    '''

    key: str = ""
    description: str = ""
    default_lambda: float = 0.2

    def __init__(self, settings: AuxSettings) -> None:
        self.settings = settings
        self.head = self.make_head(settings)

    def make_head(self, settings: AuxSettings):
        raise NotImplementedError

    def prepare_batch(self, images: np.ndarray, ids: np.ndarray,
                      rng: np.random.Generator) -> AuxBatch:
        raise NotImplementedError

    def loss(self, params: Mapping[str, Tensor], trunk: TrunkModel,
             batch: AuxBatch) -> Tensor:
        raise NotImplementedError

    def setup(self, params: ModelParams) -> None:
        '''Called once the query parameters exist'''
        pass

    def after_step(self, params: ModelParams) -> None:
        '''Called after every optimizer step'''
        pass

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        pass

    def describe(self) -> dict[str, Union[str, float, dict]]:
        return {
            "key": self.key,
            "description": self.description,
            "default_lambda": self.default_lambda,
            "head": {
                k: list(v)
                for k, v in self.head.param_shapes().items()
            }
        }


class MomentumContrastMixin(object):
    '''
    Momentum key encoder and memory queue of the contrastive methods

    The key encoder covers the trunk and the auxiliary head. Keys computed
    during `loss` are held until `after_step`, which first updates the key
    encoder and then enqueues them.
    '''

    settings: AuxSettings
    key_params: Optional[ModelParams] = None

    def setup(self, params: ModelParams) -> None:
        self.key_params = ModelParams({
            k: v.copy()
            for k, v in params.items()
            if k.startswith("trunk.") or k.startswith("aux.")
        })
        self.queue = MemoryQueue(self.settings.capacity)
        self._pending: list[tuple[MemoryQueue, np.ndarray, np.ndarray]] = []

    def key_view(self) -> ConstView:
        if self.key_params is None:
            raise RuntimeError("Momentum encoder used before setup")
        return ConstView(self.key_params)

    def negatives_of(self, queue: MemoryQueue) -> np.ndarray:
        if len(queue) == 0:
            logger.warning("Empty negative queue, contrastive term is zero")
        return queue.negatives()

    def defer_push(self, queue: MemoryQueue, keys: np.ndarray,
                   ids: np.ndarray) -> None:
        self._pending.append((queue, keys, ids))

    def after_step(self, params: ModelParams) -> None:
        momentum_update(self.key_params, params, self.settings.momentum)
        for queue, keys, ids in self._pending:
            queue.push(keys, ids)
        self._pending = []

    def encode_keys(self, trunk: TrunkModel, inputs: np.ndarray) -> Tensor:
        '''Key-encoder features of the key views, never on a tape'''
        return trunk(self.key_view(), Tensor(inputs))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"momentum.{k}": v.copy() for k, v in self.key_params.items()}
        state.update(self.queue.state_dict("queue.global"))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.key_params:
            value = np.asarray(state[f"momentum.{k}"])
            if value.shape != self.key_params[k].shape:
                raise ShapeError(f"Momentum parameter {k} has shape "
                                 f"{value.shape}, expected "
                                 f"{self.key_params[k].shape}")
            self.key_params[k] = value
        self.queue.load_state_dict(state, "queue.global")
