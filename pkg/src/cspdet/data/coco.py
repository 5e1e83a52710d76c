"""COCO-format ingestion and emission.

Segmentations (polygons or RLE) are kept in their source form and decoded
on first access of :attr:`InstanceAnnotation.mask`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from .rle import mask_bbox, rasterize_polygons, rle_decode, rle_encode

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class InstanceAnnotation:
    """One object: a contiguous class id, an (x1, y1, x2, y2) box and a mask source.

    ``source`` is an (H, W) bool array, a list of flat polygons, or a COCO
    RLE dict with ``counts``.
    """
    class_id: int
    bbox: np.ndarray
    source: object
    height: int
    width: int
    iscrowd: bool = False

    @cached_property
    def mask(self) -> np.ndarray:
        src = self.source
        if isinstance(src, np.ndarray):
            return src.astype(bool, copy=False)
        if isinstance(src, dict):
            h, w = src.get("size", (self.height, self.width))
            return rle_decode(src["counts"], int(h), int(w))
        return rasterize_polygons(src, self.height, self.width)

    @classmethod
    def from_mask(cls, class_id: int, mask: np.ndarray, iscrowd: bool = False) -> "InstanceAnnotation":
        mask = np.asarray(mask, dtype=bool)
        return cls(class_id, mask_bbox(mask), mask, mask.shape[0], mask.shape[1], iscrowd)


@dataclass
class DatasetRecord:
    image_id: int
    width: int
    height: int
    annotations: list[InstanceAnnotation]
    path: Path | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)
    file_name: str = ""
    flags: dict = field(default_factory=dict)

    def image(self) -> np.ndarray:
        """(H, W, 3) uint8 RGB pixels."""
        if self.pixels is None:
            self.pixels = read_image(self.path)
        return self.pixels

    @property
    def instances(self) -> list[InstanceAnnotation]:
        """Training targets (crowd regions removed)."""
        return [a for a in self.annotations if not a.iscrowd]


@dataclass(frozen=True)
class CategoryMap:
    """Original COCO category ids and their contiguous 1..C replacements."""
    original_ids: tuple[int, ...]
    names: tuple[str, ...]

    def contiguous(self, original: int) -> int:
        return self.original_ids.index(original) + 1

    def original(self, contiguous: int) -> int:
        return self.original_ids[contiguous - 1]

    @property
    def num_classes(self) -> int:
        return len(self.original_ids)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def normalize_image(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W), scaled to [0, 1] then standardized."""
    x = np.asarray(pixels, dtype=np.float32) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def load_coco(json_path, image_root=None) -> tuple[list[DatasetRecord], CategoryMap]:
    """Read a COCO instances file.

    Records whose image file is missing are skipped with a warning.  A file
    that does not parse or lacks the required arrays raises DataError.
    """
    json_path = Path(json_path)
    image_root = Path(image_root) if image_root is not None else json_path.parent
    try:
        doc = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse COCO file {json_path}: {exc}") from exc
    if not isinstance(doc, dict) or not all(isinstance(doc.get(k), list) for k in ("images", "annotations", "categories")):
        raise DataError(f"{json_path}: expected 'images', 'annotations' and 'categories' arrays")

    cats = sorted(doc["categories"], key=lambda c: c["id"])
    cmap = CategoryMap(tuple(int(c["id"]) for c in cats), tuple(str(c.get("name", c["id"])) for c in cats))
    by_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    records = []
    for img in doc["images"]:
        path = image_root / img["file_name"]
        if not path.exists():
            log.warning("image %s not found; record %s skipped", path, img["id"])
            continue
        h, w = int(img["height"]), int(img["width"])
        anns = []
        for a in by_image.get(img["id"], []):
            if a["category_id"] not in cmap.original_ids:
                raise DataError(f"annotation {a.get('id')} has unknown category {a['category_id']}")
            x, y, bw, bh = (float(v) for v in a["bbox"])
            anns.append(InstanceAnnotation(cmap.contiguous(a["category_id"]), np.array([x, y, x + bw, y + bh]),
                                           a["segmentation"], h, w, bool(a.get("iscrowd", 0))))
        records.append(DatasetRecord(int(img["id"]), w, h, anns, path=path, file_name=img["file_name"]))
    return records, cmap


def write_coco(records: list[DatasetRecord], json_path, image_dir=None,
               categories: CategoryMap | None = None) -> None:
    """Emit images as PNG plus a COCO instances file with uncompressed RLE masks."""
    json_path = Path(json_path)
    image_dir = Path(image_dir) if image_dir is not None else json_path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    if categories is None:
        n = max([a.class_id for r in records for a in r.annotations], default=1)
        categories = CategoryMap(tuple(range(1, n + 1)), tuple(f"class{i}" for i in range(1, n + 1)))
    images, annotations = [], []
    ann_id = 1
    for rec in records:
        name = rec.file_name or f"{rec.image_id:06d}.png"
        write_image(image_dir / name, rec.image())
        images.append({"id": rec.image_id, "file_name": str((image_dir / name).relative_to(json_path.parent)),
                       "width": rec.width, "height": rec.height})
        for a in rec.annotations:
            m = a.mask
            x1, y1, x2, y2 = (float(v) for v in a.bbox)
            annotations.append({
                "id": ann_id, "image_id": rec.image_id, "category_id": categories.original(a.class_id),
                "bbox": [x1, y1, x2 - x1, y2 - y1], "area": int(m.sum()), "iscrowd": int(a.iscrowd),
                "segmentation": {"size": [rec.height, rec.width], "counts": rle_encode(m)},
            })
            ann_id += 1
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": i, "name": n} for i, n in zip(categories.original_ids, categories.names)]}
    json_path.write_text(json.dumps(doc))


def training_target(record: DatasetRecord) -> dict:
    """Boxes, classes and masks of the non-crowd instances."""
    inst = record.instances
    h, w = record.height, record.width
    return {
        "boxes": np.array([a.bbox for a in inst], dtype=np.float64).reshape(-1, 4),
        "classes": np.array([a.class_id for a in inst], dtype=np.int64),
        "masks": np.stack([a.mask for a in inst]) if inst else np.zeros((0, h, w), dtype=bool),
    }
