"""RoIAlign with half-pixel sampling.

Bilinear sampling inside a box factorizes into a row weight and a column
weight, so every RoI's pooled output is ``Wy @ feature @ Wx.T`` for two small
interpolation matrices.  Forward and backward are then plain matmuls.
"""
from __future__ import annotations

import logging

import numpy as np

from ..tensor.core import Tensor, concat, getitem, make_result

log = logging.getLogger(__name__)


def _axis_weights(start: np.ndarray, length: np.ndarray, bins: int, sampling: int, extent: int) -> np.ndarray:
    """(R, bins, extent) averaged bilinear weights along one axis."""
    r = len(start)
    offsets = (np.arange(bins)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).reshape(-1)
    coords = start[:, None] + offsets[None, :] * (length / bins)[:, None]       # (R, bins*s)
    valid = (coords >= -1.0) & (coords <= extent)
    c = np.maximum(coords, 0.0)
    low = np.floor(c).astype(np.int64)
    at_edge = low >= extent - 1
    low = np.where(at_edge, extent - 1, low)
    high = np.where(at_edge, extent - 1, low + 1)
    frac = np.where(at_edge, 0.0, c - low)
    w = np.zeros((r, bins * sampling, extent))
    ri = np.repeat(np.arange(r), bins * sampling)
    si = np.tile(np.arange(bins * sampling), r)
    np.add.at(w, (ri, si, low.ravel()), ((1.0 - frac) * valid).ravel())
    np.add.at(w, (ri, si, high.ravel()), (frac * valid).ravel())
    return w.reshape(r, bins, sampling, extent).mean(axis=2)


def roi_weights(rois: np.ndarray, spatial_scale: float, output_size: tuple[int, int], sampling: int,
                feature_hw: tuple[int, int], stats: dict | None = None):
    """Row/column interpolation matrices for each RoI on one feature map."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x1 = rois[:, 0] * spatial_scale - 0.5
    y1 = rois[:, 1] * spatial_scale - 0.5
    w = (rois[:, 2] - rois[:, 0]) * spatial_scale
    h = (rois[:, 3] - rois[:, 1]) * spatial_scale
    degenerate = (w < 1.0) | (h < 1.0)
    if degenerate.any():
        if stats is not None:
            stats["degenerate_rois"] = stats.get("degenerate_rois", 0) + int(degenerate.sum())
        w = np.maximum(w, 1.0)
        h = np.maximum(h, 1.0)
    wy = _axis_weights(y1, h, output_size[0], sampling, feature_hw[0])
    wx = _axis_weights(x1, w, output_size[1], sampling, feature_hw[1])
    return wy, wx


def roi_align(feature: Tensor, rois: np.ndarray, batch_index: np.ndarray, spatial_scale: float,
              output_size: tuple[int, int] = (7, 7), sampling: int = 2, stats: dict | None = None) -> Tensor:
    """Pool (R, C, out_h, out_w) features for boxes given in image coordinates."""
    n, c, fh, fw = feature.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    batch_index = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    r = len(rois)
    ph, pw = output_size
    fd = feature.data
    dtype = fd.dtype
    if r == 0:
        return make_result(np.zeros((0, c, ph, pw), dtype=dtype), (feature,),
                           lambda g: (np.zeros_like(fd),))
    wy, wx = roi_weights(rois, spatial_scale, output_size, sampling, (fh, fw), stats)
    wy, wx = wy.astype(dtype), wx.astype(dtype)
    out = np.empty((r, c, ph, pw), dtype=dtype)
    groups = [(b, np.flatnonzero(batch_index == b)) for b in np.unique(batch_index)]
    for b, idx in groups:
        rows = np.matmul(wy[idx][:, None], fd[b][None])          # (k, C, ph, W)
        out[idx] = np.matmul(rows, wx[idx].transpose(0, 2, 1)[:, None])

    def bw(g):
        gf = np.zeros_like(fd)
        for b, idx in groups:
            t = np.matmul(g[idx], wx[idx][:, None])               # (k, C, ph, W)
            k, _, _, w = t.shape
            # contract over (roi, output row) as one GEMM
            a = wy[idx].reshape(k * ph, fh).T
            bmat = t.transpose(0, 2, 1, 3).reshape(k * ph, c * w)
            gf[b] = (a @ bmat).reshape(fh, c, w).transpose(1, 0, 2)
        return (gf,)

    return make_result(out, (feature,), bw)


def assign_levels(rois: np.ndarray, min_level: int, max_level: int, canonical_size: float = 224.0,
                  canonical_level: int = 4) -> np.ndarray:
    """Pyramid level per RoI by the usual sqrt-area heuristic."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    scale = np.sqrt(np.clip((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1]), 1e-6, None))
    lvl = np.floor(canonical_level + np.log2(scale / canonical_size + 1e-8))
    return np.clip(lvl, min_level, max_level).astype(np.int64)


def multilevel_roi_align(features: dict[int, Tensor], rois: np.ndarray, batch_index: np.ndarray,
                         output_size: tuple[int, int], sampling: int = 2, levels=(3, 4, 5),
                         stats: dict | None = None) -> Tensor:
    """RoIAlign each RoI on the pyramid level chosen by :func:`assign_levels`."""
    levels = [lvl for lvl in levels if lvl in features]
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if len(levels) == 1:
        lvl = levels[0]
        return roi_align(features[lvl], rois, batch_index, 1.0 / 2 ** lvl, output_size, sampling, stats)
    assigned = assign_levels(rois, min(levels), max(levels))
    parts, order = [], []
    for lvl in levels:
        idx = np.flatnonzero(assigned == lvl)
        if idx.size == 0:
            continue
        parts.append(roi_align(features[lvl], rois[idx], np.asarray(batch_index)[idx], 1.0 / 2 ** lvl,
                               output_size, sampling, stats))
        order.append(idx)
    if not parts:
        c = next(iter(features.values())).shape[1]
        return Tensor(np.zeros((0, c) + tuple(output_size), dtype=next(iter(features.values())).dtype))
    pooled = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return getitem(pooled, inverse, unique=True)
