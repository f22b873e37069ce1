"""
Dense contrast: the global momentum-contrast term plus a local term over
grid-pooled cells, where each query cell is paired with its most similar
key cell
"""

from __future__ import annotations
from typing import Mapping, Union

import logging

import numpy as np

from ..autodiff import Tensor
from ..nn import DenseCLHead, TrunkModel, l2_normalize
from .mixins import AuxBatch, AuxSettings, contrastive_term
from .moco import MoCoMethod, project_global
from .queue import MemoryQueue

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

Scalar = Union[Tensor, float]


def project_dense(params: Mapping[str, Tensor], features: Tensor,
                  head: DenseCLHead) -> Tensor:
    '''
    Pool [N, C, H, W] features onto the head's grid, apply the two 1x1
    convolutions and normalize every cell

    Returns:
        [N, grid * grid, out_dim] unit rows
    '''
    return l2_normalize(head.local(params, features))


def dense_match(q_cells: Union[Tensor, np.ndarray],
                k_cells: Union[Tensor, np.ndarray]) -> np.ndarray:
    '''
    Index of the most similar key cell for each query cell. Ties go to
    the lowest index
    '''
    q = q_cells.data if isinstance(q_cells, Tensor) else np.asarray(q_cells)
    k = k_cells.data if isinstance(k_cells, Tensor) else np.asarray(k_cells)
    return np.argmax(q @ k.T, axis=-1)


def densecl_loss(global_term: Scalar, local_term: Scalar,
                 w_local: float) -> Scalar:
    '''
    (1 - w_local) * global + w_local * local

    Raises:
        ValueError: If w_local is outside [0, 1]
    '''
    if not 0.0 <= w_local <= 1.0:
        logger.error(f"w_local {w_local} outside [0, 1]")
        raise ValueError(f"w_local must lie in [0, 1], got {w_local}")
    if isinstance(global_term, Tensor) or isinstance(local_term, Tensor):
        return global_term * (1.0 - w_local) + local_term * w_local
    return (1.0 - w_local) * global_term + w_local * local_term


class DenseCLMethod(MoCoMethod):
    '''
    Local negatives come from a second queue holding one pooled local key
    per image, sized like the global queue
    '''

    key = "densecl"
    description = ("Global InfoNCE plus local InfoNCE over matched grid "
                   "cells")
    default_lambda = 0.2

    def make_head(self, settings: AuxSettings) -> DenseCLHead:
        return DenseCLHead(settings.feature_dim, grid=settings.grid)

    def setup(self, params) -> None:
        super().setup(params)
        self.local_queue = MemoryQueue(self.settings.capacity)

    def loss(self, params: Mapping[str, Tensor], trunk: TrunkModel,
             batch: AuxBatch) -> Tensor:
        features = trunk(params, Tensor(batch.inputs))
        query = project_global(params, features, self.head)
        q_cells = project_dense(params, features, self.head)

        key_view = self.key_view()
        key_features = self.encode_keys(trunk, batch.key_inputs)
        keys = project_global(key_view, key_features, self.head).data
        k_cells = project_dense(key_view, key_features, self.head).data

        matched = np.stack([
            k_cells[i][dense_match(q_cells.data[i], k_cells[i])]
            for i in range(k_cells.shape[0])
        ])
        n, cells, dim = q_cells.shape
        global_term = contrastive_term(query, keys,
                                       self.negatives_of(self.queue),
                                       self.settings.tau)
        local_term = contrastive_term(q_cells.reshape(n * cells, dim),
                                      matched.reshape(n * cells, dim),
                                      self.local_queue.negatives(),
                                      self.settings.tau)

        self.defer_push(self.queue, keys, batch.ids)
        self.defer_push(self.local_queue, k_cells.mean(axis=1), batch.ids)
        return densecl_loss(global_term, local_term, self.settings.w_local)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state.update(self.local_queue.state_dict("queue.local"))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        self.local_queue.load_state_dict(state, "queue.local")


def _run_imports() -> None:
    from ..method_factory import register_method
    register_method(DenseCLMethod, "densecl")
