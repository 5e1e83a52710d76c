"""Turn head outputs into image-space detections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import batched_nms, decode_boxes

BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass
class Detection:
    box: np.ndarray            # (4,) x1, y1, x2, y2
    class_id: int
    score: float
    mask: np.ndarray | None = field(default=None, repr=False)   # (H, W) bool


def select_detections(proposals: np.ndarray, scores: np.ndarray, deltas: np.ndarray,
                      image_size: tuple[int, int], score_thresh: float, nms_thresh: float,
                      max_det: int, box_weights=BOX_WEIGHTS):
    """Per-class score filter, per-class NMS, then the top ``max_det`` overall.

    ``scores`` is (R, C+1) softmax output with background in column 0 and
    ``deltas`` (R, 4C).  Returns boxes (K, 4), scores (K,), classes (K,).
    """
    num_classes = scores.shape[1] - 1
    all_boxes, all_scores, all_cls = [], [], []
    for c in range(1, num_classes + 1):
        keep = np.flatnonzero(scores[:, c] > score_thresh)
        if keep.size == 0:
            continue
        boxes = decode_boxes(proposals[keep], deltas[keep, 4 * (c - 1):4 * c], box_weights, image_size)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        all_boxes.append(boxes[valid])
        all_scores.append(scores[keep[valid], c])
        all_cls.append(np.full(int(valid.sum()), c))
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    boxes = np.concatenate(all_boxes)
    sc = np.concatenate(all_scores)
    cls = np.concatenate(all_cls)
    keep = batched_nms(boxes, sc, cls, nms_thresh)[:max_det]
    return boxes[keep], sc[keep], cls[keep]


def paste_mask(prob: np.ndarray, box: np.ndarray, image_size: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Bilinearly resample an (M, M) probability mask into ``box`` and threshold it.

    Only pixels whose centers fall inside the box can be set.
    """
    h, w = image_size
    out = np.zeros((h, w), dtype=bool)
    x1, y1, x2, y2 = [float(v) for v in box]
    bw, bh = max(x2 - x1, 1e-6), max(y2 - y1, 1e-6)
    c0, c1 = int(np.ceil(x1 - 0.5)), int(np.ceil(x2 - 0.5))
    r0, r1 = int(np.ceil(y1 - 0.5)), int(np.ceil(y2 - 0.5))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, w), min(r1, h)
    if c1 <= c0 or r1 <= r0:
        return out
    m = prob.shape
    wy = _bilinear_rows((np.arange(r0, r1) + 0.5 - y1) / bh * m[0] - 0.5, m[0])
    wx = _bilinear_rows((np.arange(c0, c1) + 0.5 - x1) / bw * m[1] - 0.5, m[1])
    out[r0:r1, c0:c1] = (wy @ prob @ wx.T) >= threshold
    return out


def _bilinear_rows(coords: np.ndarray, n: int) -> np.ndarray:
    c = np.clip(coords, 0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    mat = np.zeros((len(c), n))
    rows = np.arange(len(c))
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def postprocess(proposals: np.ndarray, scores: np.ndarray, deltas: np.ndarray, mask_probs_fn,
                image_size: tuple[int, int], score_thresh: float = 0.05, nms_thresh: float = 0.5,
                max_det: int = 100) -> list[Detection]:
    """Full inference tail for one image.

    ``mask_probs_fn(boxes, classes)`` returns (K, M, M) probabilities for the
    predicted class of each kept box.
    """
    boxes, sc, cls = select_detections(proposals, scores, deltas, image_size, score_thresh, nms_thresh, max_det)
    if len(boxes) == 0:
        return []
    probs = mask_probs_fn(boxes, cls)
    return [Detection(boxes[i], int(cls[i]), float(sc[i]), paste_mask(probs[i], boxes[i], image_size))
            for i in range(len(boxes))]
