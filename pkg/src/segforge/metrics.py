"""Segmentation metrics and the differentiable soft-dice loss.

Hard metrics operate on integer label maps and use the convention that a
class absent from both prediction and target scores a perfect 1.0 (Dice and
IoU) or is skipped entirely (mean IoU). The soft loss runs through the
autodiff tape so it can drive training.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, log_softmax, mul, record, softmax

DICE_EPS = 1e-6


def _check_label_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"label maps differ in shape: {pred.shape} vs {target.shape}")
    if not np.issubdtype(pred.dtype, np.integer) or not np.issubdtype(target.dtype, np.integer):
        raise ContractError("hard metrics expect integer label maps")


def dice_score(pred: np.ndarray, target: np.ndarray, cls: int) -> float:
    """Dice overlap for one class; 1.0 when the class is absent from both."""
    _check_label_pair(pred, target)
    p = pred == cls
    t = target == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def iou_score(pred: np.ndarray, target: np.ndarray, cls: int) -> float:
    """Intersection over union for one class; 1.0 when both are empty."""
    _check_label_pair(pred, target)
    p = pred == cls
    t = target == cls
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, t).sum()) / union


def mean_iou(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    """IoU averaged over the classes present in prediction or target."""
    _check_label_pair(pred, target)
    scores = []
    for cls in range(num_classes):
        p = pred == cls
        t = target == cls
        union = int(np.logical_or(p, t).sum())
        if union == 0:
            continue
        scores.append(int(np.logical_and(p, t).sum()) / union)
    if not scores:
        raise ContractError("mean_iou: no class present in either map")
    return float(np.mean(scores))


def pixel_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    _check_label_pair(pred, target)
    return float(np.mean(pred == target))


def binary_dice(pred: np.ndarray, target: np.ndarray) -> float:
    """Dice of the foreground-vs-background split (any nonzero label)."""
    _check_label_pair(pred, target)
    p = pred != 0
    t = target != 0
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def binary_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """IoU of the foreground-vs-background split (any nonzero label)."""
    _check_label_pair(pred, target)
    p = pred != 0
    t = target != 0
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, t).sum()) / union


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis of [N,C,H,W] logits; ties pick the lowest class."""
    if logits.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] logits, got shape {logits.shape}")
    return logits.argmax(axis=1).astype(np.uint8)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[N,H,W] integer labels -> [N,C,H,W] one-hot floats."""
    if labels.ndim != 3:
        raise ShapeError(f"expected [N,H,W] labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"labels outside [0, {num_classes}): "
                            f"min {labels.min()}, max {labels.max()}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1, axis=1)
    return out


def soft_dice_loss(logits: Tensor, target_onehot: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over classes of the soft Dice between softmax(logits) and target.

    Per-class Dice pools intersection and sums over the whole batch; eps in
    numerator and denominator keeps absent classes at a perfect score.
    """
    if logits.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] logits, got shape {logits.shape}")
    if target_onehot.shape != logits.shape:
        raise ShapeError(f"one-hot target shape {target_onehot.shape} "
                         f"does not match logits {logits.shape}")
    n, c, h, w = logits.shape
    p = softmax(logits, axis=1)
    t = target_onehot.astype(p.dtype, copy=False)
    tsum = t.sum(axis=(0, 2, 3))

    inter = _sum_weighted_per_class(p, t)            # [C], differentiable
    psum = _sum_weighted_per_class(p, np.ones(1, dtype=p.dtype))  # plain per-class sum

    num = inter * 2.0 + eps
    den = psum + Tensor(tsum.astype(p.dtype)) + eps
    dice = num / den
    return 1.0 - dice.mean()


def _sum_weighted_per_class(p: Tensor, weight: np.ndarray) -> Tensor:
    """Differentiable sum over batch and space of p * weight, per class."""
    n, c, h, w = p.shape
    wfull = np.broadcast_to(weight, p.shape) if weight.shape != p.shape else weight
    out = (p.data * wfull).sum(axis=(0, 2, 3))

    def grad_fn(g):
        return (np.ascontiguousarray(np.broadcast_to(g.reshape(1, c, 1, 1), p.shape) * wfull),)

    return record("per_class_sum", (p,), out, grad_fn)


def cross_entropy_loss(logits: Tensor, target_onehot: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy from [N,C,H,W] logits and one-hot target."""
    if logits.ndim != 4 or target_onehot.shape != logits.shape:
        raise ShapeError(f"cross entropy needs matching [N,C,H,W], got "
                         f"{logits.shape} and {target_onehot.shape}")
    n, c, h, w = logits.shape
    logp = log_softmax(logits, axis=1)
    picked = mul(logp, Tensor(target_onehot.astype(logp.dtype, copy=False)))
    return picked.sum() * (-1.0 / (n * h * w))
