"""
Target-task losses and evaluation metrics for depth estimation, semantic
segmentation and boundary detection
"""

from __future__ import annotations
from typing import Sequence, Union

import logging

import attr
import numpy as np

from .autodiff import Op, Tensor, ShapeError, register_op, apply_op

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()

ArrayLike = Union[Tensor, np.ndarray]

TASK_METRICS = {"depth": "rmse", "semseg": "miou", "boundary": "ods_f"}

BOUNDARY_POS_WEIGHT = 0.95
BOUNDARY_NEG_WEIGHT = 0.05

ODS_THRESHOLDS = np.round(np.linspace(0.01, 0.99, 99), 2)

# Centre first, then 4-neighbours, then diagonals
_MATCH_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1),
                  (1, -1), (1, 1))


class LabelError(ValueError):
    """Raised when a class label lies outside the valid range"""
    pass


@attr.s(auto_attribs=True, frozen=True)
class MetricValue(object):
    '''
    Dataset-level metric

    Attributes:
        name: One of rmse, miou, ods_f
        value: Aggregated metric
        count: Number of samples aggregated
    '''
    name: str
    value: float
    count: int


def _array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        logger.error(f"Labels outside [0, {num_classes})")
        raise LabelError(f"Labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


@register_op("l1_loss")
class _L1Loss(Op):
    @staticmethod
    def forward(ctx, pred, gt):
        if pred.shape != gt.shape:
            raise ShapeError(f"l1_loss of {pred.shape} and {gt.shape}")
        diff = pred - gt
        ctx.sign, ctx.count = np.sign(diff), diff.size
        return np.abs(diff).mean()

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.sign / ctx.count, None)


@register_op("softmax_cross_entropy")
class _SoftmaxCrossEntropy(Op):
    @staticmethod
    def forward(ctx, logits, labels, axis):
        shift = logits - logits.max(axis=axis, keepdims=True)
        exps = np.exp(shift)
        norm = exps.sum(axis=axis, keepdims=True)
        idx = np.expand_dims(labels, axis)
        picked = np.take_along_axis(shift, idx, axis=axis)

        onehot = np.zeros_like(logits)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
        ctx.probs, ctx.onehot, ctx.count = exps / norm, onehot, labels.size
        return (np.log(norm) - picked).mean()

    @staticmethod
    def backward(ctx, grad):
        return (grad * (ctx.probs - ctx.onehot) / ctx.count, )


@register_op("weighted_bce")
class _WeightedBCE(Op):
    @staticmethod
    def forward(ctx, logits, targets, pos_weight, neg_weight):
        if logits.shape != targets.shape:
            raise ShapeError(f"weighted_bce of {logits.shape} and "
                             f"{targets.shape}")
        # -log(sigmoid(x)) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
        loss = (pos_weight * targets * np.logaddexp(0.0, -logits) +
                neg_weight * (1.0 - targets) * np.logaddexp(0.0, logits))
        sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
        ctx.dlogits = (neg_weight * (1.0 - targets) * sig - pos_weight *
                       targets * (1.0 - sig)) / logits.size
        return loss.mean()

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.dlogits, None)


def l1_loss(pred: Tensor, gt: ArrayLike) -> Tensor:
    '''
    Mean absolute error between a depth prediction and its ground truth
    '''
    return apply_op("l1_loss", pred, Tensor(_array(gt)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          axis: int = 1) -> Tensor:
    '''
    Mean softmax cross-entropy with class scores along `axis`

    Raises:
        LabelError: If a label is outside [0, logits.shape[axis])
        ShapeError: If labels do not match the non-class axes of logits
    '''
    labels = _check_labels(labels, logits.shape[axis])
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expected:
        raise ShapeError(f"Labels of shape {labels.shape} do not match "
                         f"logits {logits.shape} on axis {axis}")
    return apply_op("softmax_cross_entropy", logits, labels=labels, axis=axis)


def ce_loss_semseg(logits: Tensor, gt: np.ndarray) -> Tensor:
    '''
    Per-pixel cross-entropy for [C, H, W] or [N, C, H, W] logits
    '''
    return softmax_cross_entropy(logits, gt, axis=0 if logits.ndim == 3 else 1)


def weighted_bce_boundary(logits: Tensor,
                          gt: ArrayLike,
                          pos_weight: float = BOUNDARY_POS_WEIGHT,
                          neg_weight: float = BOUNDARY_NEG_WEIGHT) -> Tensor:
    '''
    Class-weighted binary cross-entropy on boundary logits
    '''
    return apply_op("weighted_bce",
                    logits,
                    Tensor(_array(gt)),
                    pos_weight=pos_weight,
                    neg_weight=neg_weight)


def rmse(pred: ArrayLike, gt: ArrayLike) -> float:
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"rmse of {pred.shape} and {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt)**2)))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray,
                     num_classes: int) -> np.ndarray:
    '''
    Returns:
        [C, C] counts indexed by (ground truth, prediction)
    '''
    pred = _check_labels(pred, num_classes).reshape(-1)
    gt = _check_labels(gt, num_classes).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError("Prediction and ground truth sizes differ")
    return np.bincount(gt * num_classes + pred,
                       minlength=num_classes**2).reshape(
                           num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    '''
    Mean IoU over classes present in the prediction or the ground truth
    '''
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        return 0.0
    return float(np.mean(inter[present] / union[present]))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes))


def _shifted(offset: int, size: int) -> tuple[slice, slice]:
    '''Source and destination slices for a shift by `offset`'''
    if offset >= 0:
        return slice(0, size - offset), slice(offset, size)
    return slice(-offset, size), slice(0, size + offset)


def match_boundaries(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    '''
    Greedy one-to-one matching of predicted to ground-truth boundary
    pixels within Chebyshev distance 1

    Offsets are tried in a fixed order; at each offset every unmatched
    prediction claims the unmatched ground-truth pixel at that offset.

    Returns:
        (true positives, false positives, false negatives)
    '''
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    free_p = pred.copy()
    free_g = gt.copy()
    h, w = pred.shape
    for dr, dc in _MATCH_OFFSETS:
        rs, rd = _shifted(dr, h)
        cs, cd = _shifted(dc, w)
        hit = free_p[rs, cs] & free_g[rd, cd]
        free_p[rs, cs] &= ~hit
        free_g[rd, cd] &= ~hit
    tp = int(pred.sum() - free_p.sum())
    return tp, int(free_p.sum()), int(free_g.sum())


def f_measure(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def ods_fscore(pred_probs: Sequence[ArrayLike],
               gts: Sequence[ArrayLike],
               thresholds: np.ndarray = ODS_THRESHOLDS) -> float:
    '''
    Optimal-dataset-scale F-measure

    For every threshold all predictions are binarized (prob >= t), matched
    against ground truth with a one pixel tolerance and TP/FP/FN are summed
    over the dataset. The best F-measure over thresholds is returned.

    Raises:
        ShapeError: On length or shape mismatches
    '''
    if len(pred_probs) != len(gts):
        raise ShapeError(f"{len(pred_probs)} predictions for "
                         f"{len(gts)} ground truths")
    probs = [_array(p) for p in pred_probs]
    masks = [_array(g) > 0.5 for g in gts]
    for p, g in zip(probs, masks):
        if p.shape != g.shape:
            raise ShapeError(f"Boundary shapes {p.shape} and {g.shape}")

    best = 0.0
    for t in thresholds:
        tp = fp = fn = 0
        for p, g in zip(probs, masks):
            a, b, c = match_boundaries(p >= t, g)
            tp, fp, fn = tp + a, fp + b, fn + c
        best = max(best, f_measure(tp, fp, fn))
    return best


def head_channels(task: str, num_classes: int) -> int:
    if task not in TASK_METRICS:
        raise KeyError(f"Unknown target task {task}")
    return num_classes if task == "semseg" else 1


def target_loss(task: str, output: Tensor, labels: np.ndarray) -> Tensor:
    '''
    Loss of a target head output [N, ch, H, W] against batch labels
    '''
    n, _, h, w = output.shape
    if task == "depth":
        return l1_loss(output.reshape(n, h, w), labels)
    if task == "semseg":
        return ce_loss_semseg(output, labels)
    if task == "boundary":
        return weighted_bce_boundary(output.reshape(n, h, w), labels)
    raise KeyError(f"Unknown target task {task}")


class MetricAccumulator(object):
    '''
    Accumulates head outputs over a dataset and reduces them to the
    task's metric. Aggregation does not depend on sample order
    '''
    def __init__(self, task: str, num_classes: int) -> None:
        self.task = task
        self.num_classes = num_classes
        self.count = 0
        self._sq_err = 0.0
        self._pixels = 0
        self._conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        self._probs: list[np.ndarray] = []
        self._gts: list[np.ndarray] = []

    def update(self, output: np.ndarray, labels: np.ndarray) -> None:
        output = _array(output)
        self.count += output.shape[0]
        if self.task == "depth":
            err = output[:, 0] - labels
            self._sq_err += float((err * err).sum())
            self._pixels += err.size
        elif self.task == "semseg":
            self._conf += confusion_matrix(output.argmax(axis=1), labels,
                                           self.num_classes)
        elif self.task == "boundary":
            probs = 0.5 * (1.0 + np.tanh(0.5 * output[:, 0]))
            self._probs.extend(probs)
            self._gts.extend(np.asarray(labels))
        else:
            raise KeyError(f"Unknown target task {self.task}")

    def result(self) -> MetricValue:
        name = TASK_METRICS[self.task]
        if self.task == "depth":
            value = float(np.sqrt(self._sq_err / max(self._pixels, 1)))
        elif self.task == "semseg":
            value = miou_from_confusion(self._conf)
        else:
            value = ods_fscore(self._probs, self._gts)
        return MetricValue(name, value, self.count)
