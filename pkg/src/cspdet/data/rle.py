"""Column-major run-length encoding of binary masks (COCO layout)."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a binary (H, W) mask read in column-major order.

    The first run always counts zeros, so a mask whose first pixel is set
    starts with a 0.
    """
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`rle_encode`; ``counts`` may also be a compressed string."""
    if isinstance(counts, (str, bytes)):
        counts = rle_from_string(counts)
    counts = np.asarray(counts, dtype=np.int64)
    area = height * width
    if np.any(counts < 0):
        raise InvalidArgument("negative run length")
    if counts.sum() > area:
        raise InvalidArgument(f"run lengths sum to {int(counts.sum())}, more than {area} pixels")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.zeros(area, dtype=bool)
    flat[:counts.sum()] = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def rle_to_string(counts) -> str:
    """Compress counts into the COCO 6-bit character encoding."""
    out = []
    counts = [int(c) for c in counts]
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(s: str | bytes) -> list[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            if p >= len(s):
                raise InvalidArgument("truncated compressed RLE string")
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rasterize_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Union of polygons, each filled by the even-odd rule at pixel centers.

    ``polygons`` is a list of flat ``[x0, y0, x1, y1, ...]`` coordinate lists.
    """
    mask = np.zeros((height, width), dtype=bool)
    centers_x = np.arange(width) + 0.5
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        x0, y0 = pts[:, 0], pts[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        inside = np.zeros((height, width), dtype=bool)
        lo = max(int(np.floor(y0.min())), 0)
        hi = min(int(np.ceil(y0.max())), height)
        for row in range(lo, hi):
            yc = row + 0.5
            # half-open rule so shared vertices are counted once
            hit = (y0 <= yc) != (y1 <= yc)
            if not hit.any():
                continue
            t = (yc - y0[hit]) / (y1[hit] - y0[hit])
            xs = np.sort(x0[hit] + t * (x1[hit] - x0[hit]))
            crossings = np.searchsorted(xs, centers_x)
            inside[row] = crossings % 2 == 1
        mask |= inside
    return mask


def mask_bbox(mask: np.ndarray) -> np.ndarray:
    """Tight (x1, y1, x2, y2) box in pixel-edge coordinates; zeros for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return np.zeros(4)
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)
