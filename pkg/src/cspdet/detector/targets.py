"""Matching of anchors/proposals to ground-truth boxes, and label sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from .boxes import box_iou, encode_boxes

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class TargetAssignment:
    labels: np.ndarray        # (A,) POSITIVE / NEGATIVE / IGNORE
    matched: np.ndarray       # (A,) ground-truth index, -1 when unmatched
    deltas: np.ndarray        # (A, 4) regression targets, zero off positives
    max_iou: np.ndarray       # (A,)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_targets(boxes: np.ndarray, gt_boxes: np.ndarray, pos_iou: float, neg_iou: float,
                   allow_low_quality: bool = True, weights=(1.0, 1.0, 1.0, 1.0)) -> TargetAssignment:
    """Label each box by its best IoU against ``gt_boxes``.

    IoU >= ``pos_iou`` is positive, below ``neg_iou`` negative, anything in
    between ignored.  With ``allow_low_quality`` every ground truth also
    claims its single best box (lowest index on ties) as a positive.
    """
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise InvalidArgument(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if len(gt_boxes) == 0:
        return TargetAssignment(np.full(n, NEGATIVE), np.full(n, -1), np.zeros((n, 4)), np.zeros(n))
    iou = box_iou(boxes, gt_boxes)
    matched = iou.argmax(axis=1)
    best = iou[np.arange(n), matched]
    labels = np.full(n, IGNORE)
    labels[best < neg_iou] = NEGATIVE
    labels[best >= pos_iou] = POSITIVE
    if allow_low_quality:
        for g in range(len(gt_boxes)):
            i = int(iou[:, g].argmax())
            if iou[i, g] > 0:
                labels[i] = POSITIVE
                matched[i] = g
    matched = np.where(labels == POSITIVE, matched, -1)
    deltas = np.zeros((n, 4))
    pos = labels == POSITIVE
    if pos.any():
        deltas[pos] = encode_boxes(boxes[pos], gt_boxes[matched[pos]], weights)
    return TargetAssignment(labels, matched, deltas, best)


def sample_labels(labels: np.ndarray, batch_size: int, positive_fraction: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random subset of positive and negative indices, positives capped by fraction."""
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = rng.permutation(pos)[:n_pos] if n_pos < len(pos) else pos
    neg = rng.permutation(neg)[:n_neg] if n_neg < len(neg) else neg
    return np.sort(pos), np.sort(neg)
