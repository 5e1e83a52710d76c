"""Independent reference implementations used to check the library.

Everything here is written for clarity with explicit loops and shares no
code with ``cspdet``.
"""
from __future__ import annotations

import math

import numpy as np


# -- dense ops ------------------------------------------------------------------------------

def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct cross-correlation: one dot product per output element."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    og = o // groups
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            chans = slice(g * cg, (g + 1) * cg)
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, chans, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, oc, i, j] = np.sum(patch * w[oc])
            if b is not None:
                out[bi, oc] += b[oc]
    return out


def naive_pool(x, kind, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = x[:, :, i * s:i * s + k, j * s:j * s + k]
            out[:, :, i, j] = win.max(axis=(2, 3)) if kind == "max" else win.mean(axis=(2, 3))
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def bilinear_resize(x, th, tw):
    """Half-pixel-center bilinear resize, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, th, tw))
    for i in range(th):
        sy = max((i + 0.5) * h / th - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(tw):
            sx = max((j + 0.5) * w / tw - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


# -- detection ops --------------------------------------------------------------------------

def bilinear_point(fmap, y, x):
    """Sample a (C, H, W) map at (y, x); zero outside [-1, H] x [-1, W]."""
    _, h, w = fmap.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return np.zeros(fmap.shape[0])
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(y), int(x)
    if y0 >= h - 1:
        y0 = y1 = h - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= w - 1:
        x0 = x1 = w - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    hy, hx = 1 - ly, 1 - lx
    return (hy * hx * fmap[:, y0, x0] + hy * lx * fmap[:, y0, x1]
            + ly * hx * fmap[:, y1, x0] + ly * lx * fmap[:, y1, x1])


def roi_align_direct(features, rois, batch_index, scale, out_hw, sampling):
    """RoIAlign by explicit sampling points (pixel centers at +0.5, RoI side >= 1)."""
    ph, pw = out_hw
    out = np.zeros((len(rois), features.shape[1], ph, pw))
    for r, (box, bi) in enumerate(zip(rois, batch_index)):
        x1, y1 = box[0] * scale - 0.5, box[1] * scale - 0.5
        rw = max((box[2] - box[0]) * scale, 1.0)
        rh = max((box[3] - box[1]) * scale, 1.0)
        bh, bw = rh / ph, rw / pw
        for i in range(ph):
            for j in range(pw):
                acc = np.zeros(features.shape[1])
                for sy in range(sampling):
                    for sx in range(sampling):
                        y = y1 + i * bh + (sy + 0.5) * bh / sampling
                        x = x1 + j * bw + (sx + 0.5) * bw / sampling
                        acc += bilinear_point(features[bi], y, x)
                out[r, :, i, j] = acc / sampling ** 2
    return out


def pair_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_reference(boxes, scores, thresh):
    """O(n^2) greedy suppression over the full IoU table."""
    n = len(boxes)
    table = [[pair_iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    alive = set(range(n))
    kept = []
    for i in order:
        if i not in alive:
            continue
        kept.append(i)
        alive -= {j for j in alive if j != i and table[i][j] > thresh}
        alive.discard(i)
    return kept


# -- masks ----------------------------------------------------------------------------------

def point_in_polygon(px, py, poly):
    """Even-odd crossing test for a flat [x0, y0, x1, y1, ...] polygon."""
    xs, ys = poly[0::2], poly[1::2]
    inside = False
    j = len(xs) - 1
    for i in range(len(xs)):
        if (ys[i] > py) != (ys[j] > py):
            xc = xs[i] + (py - ys[i]) * (xs[j] - xs[i]) / (ys[j] - ys[i])
            if px < xc:
                inside = not inside
        j = i
    return inside


def rasterize_reference(polygons, h, w):
    mask = np.zeros((h, w), bool)
    for poly in polygons:
        for y in range(h):
            for x in range(w):
                if point_in_polygon(x + 0.5, y + 0.5, poly):
                    mask[y, x] = True
    return mask


# -- ranking --------------------------------------------------------------------------------

def ap_reference(tp_flags, scores, n_gt):
    """101-point interpolated AP computed row by row like a spreadsheet."""
    rows = sorted(zip(scores, range(len(scores)), tp_flags), key=lambda r: (-r[0], r[1]))
    tp = fp = 0
    recall, precision = [], []
    for _, _, hit in rows:
        tp += int(hit)
        fp += int(not hit)
        recall.append(tp / n_gt)
        precision.append(tp / (tp + fp))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):   # the COCO recall grid
        hit = next((p for rc, p in zip(recall, precision) if rc >= r), 0.0)
        total += hit
    return total / 101
