"""Generalized Dice training loss with per-batch class weighting.

The loss weights each class by 1 / (class size)^2 so small structures
(myocardium, cavities) are not drowned out by background.  Absent classes
get a capped finite weight instead of infinity.  Deep supervision combines
the main head with auxiliary heads trained against nearest-neighbor
downsampled labels.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NotNormalized, NotOneHot, ShapeMismatch, WeightLengthMismatch
from .ops import softmax_channels
from .tensor import Tensor

# one absent-class pixel count floor; weight cap is 1/ABSENT_CLASS_EPS^2
ABSENT_CLASS_EPS = 1e-6

NORMALIZATION_TOL = 1e-4


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(B,H,W) integer labels -> (B,N,H,W) float32 one-hot planes."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float32)
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def downsample_labels(labels: np.ndarray, size: tuple) -> np.ndarray:
    """Nearest-neighbor label downsampling with half-pixel centers."""
    h2, w2 = size
    B, H, W = labels.shape
    ys = np.clip(np.floor((np.arange(h2) + 0.5) * (H / h2)).astype(np.int64), 0, H - 1)
    xs = np.clip(np.floor((np.arange(w2) + 0.5) * (W / w2)).astype(np.int64), 0, W - 1)
    return labels[:, ys[:, None], xs[None, :]]


def class_weights(target_onehot: np.ndarray) -> np.ndarray:
    """Per-batch weights 1/(sum r_l)^2, capped for absent classes."""
    counts = target_onehot.sum(axis=(0, 2, 3), dtype=np.float64)
    return (1.0 / np.maximum(counts, ABSENT_CLASS_EPS) ** 2).astype(target_onehot.dtype)


def _validate_gdl_inputs(pred: Tensor, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    t = target
    if not ((t == 0) | (t == 1)).all():
        raise NotOneHot("target contains values other than 0 and 1")
    if not (t.sum(axis=1) == 1).all():
        raise NotOneHot("target channel planes do not sum to one per pixel")
    sums = pred.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > NORMALIZATION_TOL or pred.data.min() < -NORMALIZATION_TOL:
        raise NotNormalized("pred is not a per-pixel channel distribution")


def gdl(pred_softmax: Tensor, target_onehot, validate: bool = True) -> Tensor:
    """Generalized Dice loss; 0 on perfect one-hot agreement, 1 on disjoint masks.

    Differentiable w.r.t. the prediction; target and weights are constants.
    """
    target = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot)
    target = target.astype(pred_softmax.dtype, copy=False)
    if validate:
        _validate_gdl_inputs(pred_softmax, target)
    w = Tensor(class_weights(target))
    r = Tensor(target)
    intersect = (pred_softmax * r).sum(axes=(0, 2, 3))
    total = (pred_softmax + r).sum(axes=(0, 2, 3))
    num = (w * intersect).sum()
    den = (w * total).sum()
    return 1.0 - (num / den) * 2.0


def combined_loss(
    main_logits: Tensor,
    aux_logits: Sequence[Tensor],
    target_onehot,
    weights: Sequence[float],
) -> Tensor:
    """Deep-supervision loss: weighted GDL over the main and auxiliary heads.

    Auxiliary targets are the argmax labels, nearest-neighbor downsampled to
    each head's resolution and re-one-hot.
    """
    if len(weights) != 1 + len(aux_logits):
        raise WeightLengthMismatch(
            f"{len(weights)} weights for 1 main + {len(aux_logits)} aux heads"
        )
    target = target_onehot.data if isinstance(target_onehot, Tensor) else np.asarray(target_onehot)
    num_classes = target.shape[1]
    labels = target.argmax(axis=1)
    loss = gdl(softmax_channels(main_logits), target) * float(weights[0])
    for w, head in zip(weights[1:], aux_logits):
        if w == 0.0:
            continue
        small = one_hot(downsample_labels(labels, head.shape[2:]), num_classes)
        loss = loss + gdl(softmax_channels(head), small) * float(w)
    return loss
