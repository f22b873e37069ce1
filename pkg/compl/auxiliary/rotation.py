"""
Rotation prediction: classify which multiple of 90 degrees an SSL crop
was rotated by
"""

from __future__ import annotations
from typing import Mapping, Sequence, Union

import logging

import numpy as np

from ..autodiff import Tensor
from ..augment import ssl_augment_single
from ..nn import RotHead, TrunkModel
from ..tasks import softmax_cross_entropy
from .mixins import AuxiliaryMethod, AuxBatch, AuxSettings

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

NUM_ROTATIONS = 4


def rotate_image(img: Union[np.ndarray, Tensor], k: int) -> np.ndarray:
    '''
    Rotate the two trailing axes counter-clockwise by k * 90 degrees,
    each quarter turn mapping (r, c) to (W - 1 - c, r)

    Raises:
        ValueError: If k is not in {0, 1, 2, 3}
    '''
    if k not in range(NUM_ROTATIONS):
        raise ValueError(f"Rotation label must be in 0..3, got {k}")
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    return np.ascontiguousarray(np.rot90(data, k, axes=(-2, -1)))


def rotation_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    '''
    Mean 4-way softmax cross-entropy

    Raises:
        LabelError: If a label is outside 0..3
    '''
    return softmax_cross_entropy(logits, np.asarray(labels), axis=1)


class RotationMethod(AuxiliaryMethod):
    '''
    Each auxiliary image contributes one jittered square crop rotated by a
    uniformly drawn quarter turn
    '''

    key = "rot"
    description = "4-way rotation classification on jittered crops"
    default_lambda = 0.05

    def make_head(self, settings: AuxSettings) -> RotHead:
        return RotHead(settings.feature_dim)

    def prepare_batch(self, images: np.ndarray, ids: np.ndarray,
                      rng: np.random.Generator) -> AuxBatch:
        views, labels = [], []
        for image in images:
            view = ssl_augment_single(image, self.settings.geom, rng)
            k = int(rng.integers(NUM_ROTATIONS))
            views.append(rotate_image(view, k))
            labels.append(k)
        return AuxBatch(inputs=np.stack(views),
                        ids=np.asarray(ids),
                        labels=np.asarray(labels, dtype=np.int64))

    def loss(self, params: Mapping[str, Tensor], trunk: TrunkModel,
             batch: AuxBatch) -> Tensor:
        logits = self.head(params, trunk(params, Tensor(batch.inputs)))
        return rotation_loss(logits, batch.labels)


def _run_imports() -> None:
    from ..method_factory import register_method
    register_method(RotationMethod, "rot")
