"""Datasets: COCO ingestion, RLE masks, augmentation and synthetic cells."""
from .augment import augment, hflip, resize_to, scale_jitter, vflip
from .coco import (CategoryMap, DatasetRecord, InstanceAnnotation, load_coco, normalize_image,
                   read_image, training_target, write_coco)
from .rle import mask_bbox, rasterize_polygons, rle_decode, rle_encode
from .synthetic import SyntheticCellSpec, generate_synthetic

__all__ = [
    "augment", "hflip", "resize_to", "scale_jitter", "vflip", "CategoryMap", "DatasetRecord",
    "InstanceAnnotation", "load_coco", "normalize_image", "read_image", "training_target", "write_coco",
    "mask_bbox", "rasterize_polygons", "rle_decode", "rle_encode", "SyntheticCellSpec", "generate_synthetic",
]
