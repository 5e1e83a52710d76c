"""Synthetic stained-cell images with nucleus + cytoplasm instance masks.

Every image is a function of ``(spec.seed, index)`` alone, so records can be
generated in any order or in parallel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import InvalidArgument
from .coco import DatasetRecord, InstanceAnnotation

TOUCHING = ("nucleus-nucleus", "nucleus-cytoplasm", "cytoplasm-cytoplasm")

BACKGROUND_RGB = np.array([0.90, 0.84, 0.88])
CYTOPLASM_RGB = np.array([0.62, 0.50, 0.78])
NUCLEUS_RGB = np.array([0.28, 0.14, 0.42])


@dataclass(frozen=True)
class SyntheticCellSpec:
    image_size: int = 256
    cell_count: tuple[int, int] = (2, 5)
    nucleus_radius: tuple[float, float] = (9.0, 16.0)
    cytoplasm_radius: tuple[float, float] = (18.0, 30.0)
    cytoplasm_contrast: tuple[float, float] = (0.1, 1.0)   # 0 = background colour
    overlap_prob: float = 0.3
    seed: int = 0
    max_retries: int = 60


@dataclass
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def radius_towards(self, theta: float) -> float:
        t = theta - self.angle
        return self.a * self.b / np.hypot(self.b * np.cos(t), self.a * np.sin(t))

    def raster(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dx, dy = xx - self.cx, yy - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u, v = dx * c + dy * s, -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def fits(self, size: int, margin: float = 1.0) -> bool:
        r = max(self.a, self.b)
        return margin + r <= self.cx <= size - margin - r and margin + r <= self.cy <= size - margin - r


@dataclass
class _Cell:
    cytoplasm: _Ellipse
    nucleus: _Ellipse
    contrast: float


def _random_cell(rng: np.random.Generator, spec: SyntheticCellSpec, cx: float, cy: float) -> _Cell:
    rc = rng.uniform(*spec.cytoplasm_radius)
    rn = min(rng.uniform(*spec.nucleus_radius), 0.75 * rc)
    ecc_c, ecc_n = rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)
    cyto = _Ellipse(cx, cy, rc, rc * ecc_c, rng.uniform(0, np.pi))
    # nucleus sits off-centre but inside the cytoplasm
    room = max(min(cyto.a, cyto.b) - rn, 0.0) * 0.6
    phi = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(0, room)
    nuc = _Ellipse(cx + off * np.cos(phi), cy + off * np.sin(phi), rn, rn * ecc_n, rng.uniform(0, np.pi))
    return _Cell(cyto, nuc, float(rng.uniform(*spec.cytoplasm_contrast)))


def _cell_mask(cell: _Cell, size: int) -> np.ndarray:
    return cell.cytoplasm.raster(size) | cell.nucleus.raster(size)


def _partner(rng: np.random.Generator, spec: SyntheticCellSpec, host: _Cell, config: str) -> _Cell:
    """Place a new cell so that the requested parts of it and ``host`` touch."""
    theta = rng.uniform(0, 2 * np.pi)
    probe = _random_cell(rng, spec, 0.0, 0.0)
    depth = rng.uniform(2.0, 4.0)   # slight overlap so the touching is visible in pixels
    if config == "nucleus-nucleus":
        a, b = host.nucleus, probe.nucleus
    elif config == "nucleus-cytoplasm":
        a, b = host.cytoplasm, probe.nucleus
    else:
        a, b = host.cytoplasm, probe.cytoplasm
    dist = a.radius_towards(theta) + b.radius_towards(theta + np.pi) - depth
    # move the probe so part ``b`` lands at the required distance from part ``a``
    tx = a.cx + dist * np.cos(theta) - b.cx
    ty = a.cy + dist * np.sin(theta) - b.cy
    for e in (probe.cytoplasm, probe.nucleus):
        e.cx += tx
        e.cy += ty
    return probe


def _render(cells: list[_Cell], size: int, rng: np.random.Generator) -> np.ndarray:
    # low-frequency stain variation plus fine grain
    blotch = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 16) * (size / 16) * 0.08
    img = BACKGROUND_RGB[None, None, :] + blotch[..., None] * np.array([0.5, 1.0, 0.6])
    for cell in cells:
        cyto = cell.cytoplasm.raster(size)
        colour = BACKGROUND_RGB + cell.contrast * (CYTOPLASM_RGB - BACKGROUND_RGB)
        img[cyto] = colour
    for cell in cells:
        nuc = cell.nucleus.raster(size)
        img[nuc] = NUCLEUS_RGB + rng.normal(scale=0.03, size=3)
    img = img + rng.normal(scale=0.02, size=img.shape)
    img = ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_one(spec: SyntheticCellSpec, index: int) -> DatasetRecord:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    want = int(rng.integers(spec.cell_count[0], spec.cell_count[1] + 1))
    cells: list[_Cell] = []
    masks: list[np.ndarray] = []
    configs: list[str] = []
    paired: set[int] = set()
    for _ in range(want):
        placed = False
        touch = rng.random() < spec.overlap_prob and len(cells) > len(paired)
        for _attempt in range(spec.max_retries):
            if touch:
                host = int(rng.choice([i for i in range(len(cells)) if i not in paired]))
                config = TOUCHING[int(rng.integers(len(TOUCHING)))]
                cell = _partner(rng, spec, cells[host], config)
            else:
                margin = spec.cytoplasm_radius[1] + 1
                cell = _random_cell(rng, spec, rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
            if not (cell.cytoplasm.fits(size) and cell.nucleus.fits(size)):
                continue
            m = _cell_mask(cell, size)
            if touch:
                others = [mm for i, mm in enumerate(masks) if i != host]
                ok = (m & masks[host]).any() and not any((m & mm).any() for mm in others)
            else:
                # free cells keep a one-pixel gap from everything
                grown = ndimage.binary_dilation(m)
                ok = not any((grown & mm).any() for mm in masks)
            if ok:
                if touch:
                    paired.update((host, len(cells)))
                    configs.append(config)
                cells.append(cell)
                masks.append(m)
                placed = True
                break
        if not placed and touch:
            # fall back to an isolated cell rather than dropping it
            for _attempt in range(spec.max_retries):
                margin = spec.cytoplasm_radius[1] + 1
                cell = _random_cell(rng, spec, rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
                m = _cell_mask(cell, size)
                if cell.cytoplasm.fits(size) and not any((ndimage.binary_dilation(m) & mm).any() for mm in masks):
                    cells.append(cell)
                    masks.append(m)
                    break
    pixels = _render(cells, size, rng)
    anns = [InstanceAnnotation.from_mask(1, m) for m in masks]
    flags = {"touching": configs}
    if len(cells) < want:
        flags["placement_shortfall"] = want - len(cells)
    return DatasetRecord(index, size, size, anns, pixels=pixels, file_name=f"synth_{spec.seed}_{index:05d}.png",
                         flags=flags)


def generate_synthetic(spec: SyntheticCellSpec, n: int, start: int = 0) -> list[DatasetRecord]:
    if n < 1:
        raise InvalidArgument(f"need n >= 1, got {n}")
    return [generate_one(spec, start + i) for i in range(n)]
