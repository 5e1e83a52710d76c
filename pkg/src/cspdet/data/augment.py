"""Geometric augmentation applied consistently to pixels, masks and boxes."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from PIL import Image

from ..errors import InvalidArgument
from .coco import DatasetRecord, InstanceAnnotation


def _with(record: DatasetRecord, pixels: np.ndarray, anns: list[InstanceAnnotation], **flags) -> DatasetRecord:
    h, w = pixels.shape[:2]
    return replace(record, pixels=pixels, width=w, height=h, annotations=anns,
                   flags={**record.flags, **flags})


def _ann(a: InstanceAnnotation, mask: np.ndarray, bbox: np.ndarray) -> InstanceAnnotation:
    return InstanceAnnotation(a.class_id, bbox, mask, mask.shape[0], mask.shape[1], a.iscrowd)


def hflip(record: DatasetRecord) -> DatasetRecord:
    w = record.width
    anns = [_ann(a, a.mask[:, ::-1].copy(), np.array([w - a.bbox[2], a.bbox[1], w - a.bbox[0], a.bbox[3]]))
            for a in record.annotations]
    return _with(record, record.image()[:, ::-1].copy(), anns)


def vflip(record: DatasetRecord) -> DatasetRecord:
    h = record.height
    anns = [_ann(a, a.mask[::-1].copy(), np.array([a.bbox[0], h - a.bbox[3], a.bbox[2], h - a.bbox[1]]))
            for a in record.annotations]
    return _with(record, record.image()[::-1].copy(), anns)


def _resize_mask(mask: np.ndarray, size_hw: tuple[int, int]) -> np.ndarray:
    # bilinear on the float mask then a 0.5 cut keeps areas close under scaling
    im = Image.fromarray(mask.astype(np.float32), mode="F")
    out = np.asarray(im.resize((size_hw[1], size_hw[0]), Image.BILINEAR))
    return out >= 0.5


def _scaled(record: DatasetRecord, scale: float, canvas_hw: tuple[int, int] | None = None,
            offset: tuple[int, int] = (0, 0)) -> DatasetRecord:
    h, w = record.height, record.width
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    sy, sx = nh / h, nw / w
    img = np.asarray(Image.fromarray(record.image()).resize((nw, nh), Image.BILINEAR))
    ch, cw = canvas_hw or (nh, nw)
    oy, ox = offset
    canvas = np.zeros((ch, cw, 3), dtype=np.uint8)
    canvas[oy:oy + nh, ox:ox + nw] = img
    anns = []
    for a in record.annotations:
        m = np.zeros((ch, cw), dtype=bool)
        m[oy:oy + nh, ox:ox + nw] = _resize_mask(a.mask, (nh, nw))
        box = np.array([a.bbox[0] * sx + ox, a.bbox[1] * sy + oy, a.bbox[2] * sx + ox, a.bbox[3] * sy + oy])
        anns.append(_ann(a, m, box))
    return _with(record, canvas, anns, scale=(sy, sx), offset=(oy, ox))


def scale_jitter(record: DatasetRecord, rng: np.random.Generator, low: float = 0.8, high: float = 1.2) -> DatasetRecord:
    return _scaled(record, float(rng.uniform(low, high)))


def resize_to(record: DatasetRecord, size: int) -> DatasetRecord:
    """Fit the longer side to ``size`` and pad the shorter one evenly to a square."""
    scale = size / max(record.height, record.width)
    nh, nw = int(round(record.height * scale)), int(round(record.width * scale))
    return _scaled(record, scale, (size, size), ((size - nh) // 2, (size - nw) // 2))


def augment(record: DatasetRecord, ops, rng: np.random.Generator | None = None, size: int | None = None) -> DatasetRecord:
    """Apply the named ops in order; ``hflip``/``vflip`` fire with probability 0.5 when ``rng`` is given."""
    for op in ops:
        if op in ("hflip", "vflip"):
            if rng is None or rng.random() < 0.5:
                record = hflip(record) if op == "hflip" else vflip(record)
        elif op == "scale_jitter":
            record = scale_jitter(record, rng or np.random.default_rng(0))
        elif op == "resize_to":
            record = resize_to(record, size or max(record.height, record.width))
        else:
            raise InvalidArgument(f"unknown augmentation {op!r}")
    return record
