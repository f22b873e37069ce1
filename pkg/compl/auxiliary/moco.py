"""
Global momentum contrast: a query crop must identify the key-encoder
embedding of its partner crop among the queued embeddings of other images
"""

from __future__ import annotations
from typing import Mapping

import logging

import numpy as np

from ..autodiff import Tensor
from ..augment import ssl_augment_pair
from ..nn import MoCoHead, TrunkModel, l2_normalize
from .mixins import (AuxiliaryMethod, AuxBatch, AuxSettings,
                     MomentumContrastMixin, contrastive_term)

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()


def project_global(params: Mapping[str, Tensor], features: Tensor,
                   head: MoCoHead) -> Tensor:
    '''
    GAP, 2-layer MLP and row normalization of [N, C, H, W] features

    Returns:
        [N, out_dim] unit rows

    Raises:
        DegenerateError: If the head outputs a zero vector
    '''
    return l2_normalize(head(params, features))


class MoCoMethod(MomentumContrastMixin, AuxiliaryMethod):

    key = "moco"
    description = "Global InfoNCE against a momentum encoder and queue"
    default_lambda = 0.2

    def make_head(self, settings: AuxSettings) -> MoCoHead:
        return MoCoHead(settings.feature_dim)

    def prepare_batch(self, images: np.ndarray, ids: np.ndarray,
                      rng: np.random.Generator) -> AuxBatch:
        pairs = [ssl_augment_pair(image, self.settings.geom, rng)
                 for image in images]
        return AuxBatch(inputs=np.stack([q for q, _ in pairs]),
                        key_inputs=np.stack([k for _, k in pairs]),
                        ids=np.asarray(ids))

    def loss(self, params: Mapping[str, Tensor], trunk: TrunkModel,
             batch: AuxBatch) -> Tensor:
        query = project_global(params, trunk(params, Tensor(batch.inputs)),
                               self.head)
        key_view = self.key_view()
        keys = project_global(key_view,
                              self.encode_keys(trunk, batch.key_inputs),
                              self.head).data
        loss = contrastive_term(query, keys, self.negatives_of(self.queue),
                                self.settings.tau)
        self.defer_push(self.queue, keys, batch.ids)
        return loss


def _run_imports() -> None:
    from ..method_factory import register_method
    register_method(MoCoMethod, "moco")
