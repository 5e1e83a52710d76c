"""Per-module multiply-accumulate and parameter counts.

MACs come from a traced inference pass on a blank image: every conv and
linear primitive reports its count to the active profiler scope.  The box
head is charged for ``heads.rpn_post_nms_test`` RoIs and the mask head for
``heads.max_det`` RoIs.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .detector.model import InstanceSegmenter, ModelConfig
from .detector.roi_align import multilevel_roi_align
from .tensor import profiler
from .tensor.core import Tensor, no_grad
from .tensor.nn import manual_seed


@dataclass
class ModuleCost:
    name: str
    macs: int
    params: int


def _group(name: str, depth: int) -> str:
    return ".".join(name.split(".")[:depth]) if name else "(root)"


def model_costs(cfg: ModelConfig, image_size: int = 256, depth: int = 2) -> list[ModuleCost]:
    manual_seed(0)
    model = InstanceSegmenter(cfg).eval()
    model.assign_scope_names()
    x = np.zeros((1, 3, image_size, image_size), dtype=np.float32)
    with no_grad(), profiler.count_macs() as counter:
        pyramid = model.features(Tensor(x))
        model.rpn(pyramid)
        levels = model._roi_levels(pyramid)
        for head, count, size in ((model.box_head, cfg.heads.rpn_post_nms_test, 7),
                                  (model.mask_head, cfg.heads.max_det, 14)):
            rois = np.tile([[0.0, 0.0, 64.0, 64.0]], (count, 1))
            feats = multilevel_roi_align(pyramid, rois, np.zeros(count, dtype=np.int64), (size, size), 2, levels)
            head(feats)
    macs: dict[str, int] = defaultdict(int)
    for scope_name, m in counter.by_scope.items():
        macs[_group(scope_name, depth)] += m
    params: dict[str, int] = defaultdict(int)
    for name, p in model.named_parameters():
        params[_group(name.rsplit(".", 1)[0], depth)] += p.size
    names = sorted(set(macs) | set(params), key=_order_key)
    return [ModuleCost(n, macs.get(n, 0), params.get(n, 0)) for n in names]


def _order_key(name: str):
    parts = name.split(".")
    return [(0, int(p)) if p.isdigit() else (1, p) for p in parts]


def format_costs(rows: list[ModuleCost]) -> str:
    width = max([len(r.name) for r in rows] + [6])
    lines = [f"{'module':<{width}} {'MACs':>15} {'params':>12}"]
    for r in rows:
        lines.append(f"{r.name:<{width}} {r.macs:>15,d} {r.params:>12,d}")
    lines.append(f"{'total':<{width}} {sum(r.macs for r in rows):>15,d} {sum(r.params for r in rows):>12,d}")
    return "\n".join(lines)
