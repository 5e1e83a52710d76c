"""Training objectives: Dice / BCE mask losses, RPN and box-head losses."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..tensor import functional as F
from ..tensor.core import Tensor, as_tensor, getitem, make_result

DICE_EPS = 1e-6


def dice_coefficient(pred, gt, eps: float = DICE_EPS, axes=None) -> Tensor:
    """Soft Dice overlap ``(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)``.

    ``pred`` holds probabilities, ``gt`` a binary mask of the same shape.  With
    ``axes`` the sums run over those axes only and one coefficient per
    remaining index is returned.  Two empty masks score 1.
    """
    pred = as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"dice shapes differ: {pred.shape} vs {gt.shape}")
    inter = (pred * gt).sum(axis=axes)
    total = pred.sum(axis=axes) + gt.sum(axis=axes)
    return (inter * 2.0 + eps) / (total + eps)


def dice_loss(pred, gt, eps: float = DICE_EPS, axes=None) -> Tensor:
    """Negated Dice coefficient, in [-1, 0]."""
    return -dice_coefficient(pred, gt, eps, axes)


def select_class_channel(logits: Tensor, classes: np.ndarray) -> Tensor:
    """(R, C, M, M) logits -> (R, M, M) channel of each RoI's 1-based class."""
    classes = np.asarray(classes, dtype=np.int64)
    return getitem(logits, (np.arange(len(classes)), classes - 1), unique=True)


def mask_loss(logits: Tensor, classes: np.ndarray, targets: np.ndarray, mode: str = "dice",
              stats: dict | None = None) -> Tensor:
    """Mask objective over positive RoIs on their matched-class channel.

    ``bce`` is the mean per-pixel sigmoid cross-entropy, ``dice`` the mean of
    per-RoI Dice losses.
    """
    if mode not in ("bce", "dice"):
        raise InvalidArgument(f"mask loss mode must be bce or dice, got {mode!r}")
    if logits.shape[0] == 0:
        if stats is not None:
            stats["no_positive_rois"] = True
        return make_result(np.zeros((), logits.dtype), (logits,), lambda g: (np.zeros(logits.shape, logits.dtype),))
    chosen = select_class_channel(logits, classes)
    targets = np.asarray(targets, dtype=logits.dtype)
    if mode == "bce":
        return F.bce_with_logits(chosen, targets)
    per_roi = dice_loss(chosen.sigmoid(), targets, axes=(1, 2))
    return per_roi.mean()


def rpn_loss(objectness: Tensor, deltas: Tensor, labels: np.ndarray, target_deltas: np.ndarray,
             sampled_pos: np.ndarray, sampled_neg: np.ndarray, beta: float = 1.0 / 9,
             stats: dict | None = None) -> tuple[Tensor, Tensor]:
    """Objectness BCE and smooth-L1 box loss, both divided by the sampled count.

    ``objectness`` is (A,) and ``deltas`` (A, 4) for one image.
    """
    idx = np.concatenate([sampled_pos, sampled_neg])
    n = max(len(idx), 1)
    tgt = np.concatenate([np.ones(len(sampled_pos)), np.zeros(len(sampled_neg))])
    cls = F.bce_with_logits(getitem(objectness, idx, unique=True), tgt, reduction="sum") * (1.0 / n)
    if len(sampled_pos) == 0:
        if stats is not None:
            stats["no_positive_anchors"] = stats.get("no_positive_anchors", 0) + 1
        box = deltas.sum() * 0.0
    else:
        box = F.smooth_l1(getitem(deltas, sampled_pos, unique=True), target_deltas[sampled_pos], beta) * (1.0 / n)
    return cls, box


def box_head_loss(class_logits: Tensor, box_deltas: Tensor, labels: np.ndarray, target_deltas: np.ndarray,
                  beta: float = 1.0) -> tuple[Tensor, Tensor]:
    """Cross-entropy over (C+1) classes plus smooth-L1 on the matched class's deltas.

    ``labels`` are 0 for background, 1..C otherwise; ``box_deltas`` is (R, 4C).
    """
    labels = np.asarray(labels, dtype=np.int64)
    cls = F.cross_entropy(class_logits, labels)
    pos = np.flatnonzero(labels > 0)
    n = max(len(labels), 1)
    if len(pos) == 0:
        return cls, box_deltas.sum() * 0.0
    cols = (labels[pos] - 1)[:, None] * 4 + np.arange(4)[None, :]
    chosen = getitem(box_deltas, (pos[:, None], cols), unique=True)
    reg = F.smooth_l1(chosen, target_deltas[pos], beta) * (1.0 / n)
    return cls, reg
