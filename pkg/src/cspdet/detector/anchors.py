"""Anchor tiling over pyramid levels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ..errors import InvalidArgument

DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))


class Anchor(NamedTuple):
    box: np.ndarray
    level: int
    cell: tuple[int, int]
    aspect_index: int


@dataclass
class AnchorSet:
    """Flat anchor arrays in level-major, row-major, ratio-major, scale-minor order."""

    boxes: np.ndarray          # (A, 4)
    levels: np.ndarray         # (A,)
    cells: np.ndarray          # (A, 2) row, col
    aspect_index: np.ndarray   # (A,)
    per_location: int

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> Anchor:
        return Anchor(self.boxes[i], int(self.levels[i]), tuple(int(v) for v in self.cells[i]),
                      int(self.aspect_index[i]))


def cell_anchors(size: float, ratios: Sequence[float], scales: Sequence[float]) -> np.ndarray:
    """Centered anchors (ratio-major) for one location; ratio is height / width."""
    out = []
    for r in ratios:
        for s in scales:
            side = size * s
            w = side / np.sqrt(r)
            h = side * np.sqrt(r)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return np.asarray(out, dtype=np.float64)


def generate_anchors(pyramid_shapes: dict[int, tuple[int, int]], base_size: float = 32,
                     aspect_ratios: Sequence[float] = DEFAULT_RATIOS,
                     scales: Sequence[float] = DEFAULT_SCALES, base_level: int = 3) -> AnchorSet:
    """Tile anchors of side ``base_size * 2**(level - base_level) * scale`` over each level.

    Level ``L`` has stride ``2**L``; anchor centers sit at pixel centers
    ``(col + 0.5) * stride``.
    """
    if not aspect_ratios or not scales:
        raise InvalidArgument("anchor ratios and scales must be nonempty")
    per_loc = len(aspect_ratios) * len(scales)
    boxes, levels, cells, aspects = [], [], [], []
    for level in sorted(pyramid_shapes):
        h, w = pyramid_shapes[level]
        stride = 2 ** level
        base = cell_anchors(base_size * 2 ** (level - base_level), aspect_ratios, scales)
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (cols.ravel() + 0.5) * stride
        cy = (rows.ravel() + 0.5) * stride
        shifts = np.stack([cx, cy, cx, cy], axis=1)
        boxes.append((shifts[:, None, :] + base[None, :, :]).reshape(-1, 4))
        levels.append(np.full(h * w * per_loc, level))
        cells.append(np.repeat(np.stack([rows.ravel(), cols.ravel()], axis=1), per_loc, axis=0))
        aspects.append(np.tile(np.repeat(np.arange(len(aspect_ratios)), len(scales)), h * w))
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels), np.concatenate(cells),
                     np.concatenate(aspects), per_loc)
