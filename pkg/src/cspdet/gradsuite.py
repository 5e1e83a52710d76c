"""Finite-difference gradient checks over every differentiable building block.

Each case builds 64-bit inputs, a closure recomputing a scalar from them, and
the tensors to probe.  Primitives are held to 1e-4 relative error, composed
heads to 1e-3.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import core as C
from .tensor import functional as F
from .tensor.core import Tensor
from .tensor.gradcheck import check_gradients
from .tensor.nn import manual_seed

PRIMITIVE_TOL = 1e-4
COMPOSED_TOL = 1e-3
F64 = np.float64


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    tol: float


@dataclass
class GradOutcome:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _t(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.uniform(low, high, size=shape) if low is not None else rng.normal(size=shape)
    return Tensor(data.astype(F64), requires_grad=True)


def _weighted(out: Tensor, rng_or_w) -> Tensor:
    # a fixed random projection so every output element matters
    w = rng_or_w if isinstance(rng_or_w, np.ndarray) else rng_or_w.normal(size=out.shape)
    return (out * w).sum()


def _unary(fn, **kw):
    def build(rng):
        x = _t(rng, 4, 6, **kw)
        w = rng.normal(size=(4, 6))
        return (lambda: _weighted(fn(x), w)), [x]
    return build


def _binary(fn):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4, low=0.5, high=2.0)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(fn(a, b), w)), [a, b]
    return build


def _conv(stride, padding, groups, k, cin=4, cout=6, size=7, bias=True):
    def build(rng):
        x = _t(rng, 2, cin, size, size)
        wt = _t(rng, cout, cin // groups, k, k)
        b = _t(rng, cout) if bias else None
        out_shape = F.conv2d(x, wt, b, stride, padding, groups).shape
        w = rng.normal(size=out_shape)
        return (lambda: _weighted(F.conv2d(x, wt, b, stride, padding, groups), w)), [x, wt] + ([b] if b else [])
    return build


def _pool(kind, k=2, s=2):
    def build(rng):
        x = _t(rng, 2, 3, 6, 6)
        w = rng.normal(size=F.pool(x, kind, k, s).shape)
        return (lambda: _weighted(F.pool(x, kind, k, s), w)), [x]
    return build


def _batch_norm(rng):
    x, g, b = _t(rng, 2, 3, 2, 2), _t(rng, 3), _t(rng, 3)
    w = rng.normal(size=x.shape)
    state = F.RunningStats(3, dtype=F64)
    return (lambda: _weighted(F.batch_norm(x, g, b, state, "train"), w)), [x, g, b]


def _interp(mode, src, dst):
    def build(rng):
        x = _t(rng, 1, 2, *src)
        w = rng.normal(size=(1, 2, *dst))
        return (lambda: _weighted(F.interpolate(x, dst, mode), w)), [x]
    return build


def _linear(rng):
    x, wt, b = _t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    w = rng.normal(size=(5, 3))
    return (lambda: _weighted(F.linear(x, wt, b), w)), [x, wt, b]


def _matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(a @ b, w)), [a, b]


def _concat_split(rng):
    a, b = _t(rng, 1, 3, 2, 2), _t(rng, 1, 2, 2, 2)
    w1, w2 = rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 4, 2, 2))

    def fn():
        left, right = C.split(C.concat([a, b], axis=1), 1, axis=1)
        return _weighted(left, w1) + _weighted(right, w2)
    return fn, [a, b]


def _getitem(rng):
    x = _t(rng, 5, 4)
    idx = np.array([0, 2, 2, 4])
    w = rng.normal(size=(4, 4))
    return (lambda: _weighted(C.getitem(x, idx), w)), [x]


def _reductions(rng):
    x = _t(rng, 3, 4, 5)
    w1, w2, w3 = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    return (lambda: _weighted(x.sum(axis=1), w1) + _weighted(x.mean(axis=0), w2)
            + _weighted(x.max(axis=1), w3)), [x]


def _shape_ops(rng):
    x = _t(rng, 2, 3, 4)
    w = rng.normal(size=(4, 6))
    return (lambda: _weighted(x.transpose(2, 0, 1).reshape(4, 6), w)), [x]


def _conv_transpose(rng):
    x, wt, b = _t(rng, 2, 3, 3, 3), _t(rng, 3, 4, 2, 2), _t(rng, 4)
    w = rng.normal(size=(2, 4, 6, 6))
    return (lambda: _weighted(F.conv_transpose2d(x, wt, b, 2), w)), [x, wt, b]


def _losses(rng):
    logits = _t(rng, 6, 3)
    labels = rng.integers(0, 3, size=6)
    z = _t(rng, 8)
    tgt = (rng.random(8) < 0.5).astype(F64)
    p = _t(rng, 5, 4)
    box_tgt = p.data + rng.normal(size=(5, 4)) * 0.3
    return (lambda: F.cross_entropy(logits, labels) + F.bce_with_logits(z, tgt)
            + F.smooth_l1(p, box_tgt, beta=0.25)), [logits, z, p]


def _roi_align(rng):
    from .detector.roi_align import roi_align
    feat = _t(rng, 2, 3, 8, 8)
    rois = np.array([[1.3, 0.7, 6.2, 5.9], [0.2, 2.5, 7.7, 7.1], [2.0, 2.0, 4.5, 6.0]])
    bidx = np.array([0, 1, 1])
    w = rng.normal(size=(3, 3, 2, 2))
    return (lambda: _weighted(roi_align(feat, rois, bidx, 1.0, (2, 2), 2), w)), [feat]


def _dice(rng):
    from .detector.losses import dice_loss
    logits = _t(rng, 2, 6, 6)
    gt = rng.random((2, 6, 6)) < 0.4
    return (lambda: dice_loss(logits.sigmoid(), gt, axes=(1, 2)).mean()), [logits]


def _module_case(make, input_shape, extra=None):
    """Probe the input and every parameter of a freshly built 64-bit module."""
    def build(rng):
        manual_seed(int(rng.integers(1 << 30)))
        mod = make().astype(F64)
        x = _t(rng, *input_shape)
        out = mod(x)
        if isinstance(out, tuple):
            ws = [rng.normal(size=o.shape) for o in out]

            def fn():
                outs = mod(x)
                return sum((_weighted(o, w) for o, w in zip(outs[1:], ws[1:])), _weighted(outs[0], ws[0]))
        else:
            w = rng.normal(size=out.shape)

            def fn():
                return _weighted(mod(x), w)
        return fn, [x] + list(mod.parameters())
    return build


def _sam():
    from .backbone import SpatialAttention
    return SpatialAttention()


def _se():
    from .backbone import SqueezeExcite
    return SqueezeExcite(8, 2)


def _mbconv():
    from .backbone import MBConv
    return MBConv(8, 8, 4, 3, 1, use_sam=True, se_ratio=0.25)


def _csp_stage():
    from .backbone import CSPStage, StageSpec
    return CSPStage(8, StageSpec(2, 8, 2, 2, 3), use_sam=True, se_ratio=0.25, split_ratio=0.5)


def _merging_cell(fusion):
    def build(rng):
        from .feature_network import MergingCell, MergingCellSpec
        manual_seed(int(rng.integers(1 << 30)))
        cell = MergingCell(MergingCellSpec("c", "P3", "P5", 4, fusion), 4).astype(F64)
        a, b = _t(rng, 1, 4, 8, 8), _t(rng, 1, 4, 2, 2)
        w = rng.normal(size=(1, 4, 4, 4))
        return (lambda: _weighted(cell(a, 3, b, 5, (4, 4)), w)), [a, b] + list(cell.parameters())
    return build


def _rpn_head(rng):
    from .detector.heads import RPNHead
    manual_seed(int(rng.integers(1 << 30)))
    head = RPNHead(4, 3).astype(F64)
    pyr = {3: _t(rng, 1, 4, 4, 4), 4: _t(rng, 1, 4, 2, 2)}
    w1, w2 = rng.normal(size=(1, 60)), rng.normal(size=(1, 60, 4))

    def fn():
        o, d = head(pyr)
        return _weighted(o, w1) + _weighted(d, w2)
    return fn, list(pyr.values()) + list(head.parameters())


def _box_head(rng):
    from .detector.heads import BoxHead
    from .detector.losses import box_head_loss
    manual_seed(int(rng.integers(1 << 30)))
    head = BoxHead(3, 7, 16, 2).astype(F64)
    x = _t(rng, 4, 3, 7, 7)
    labels = np.array([0, 1, 2, 1])
    tgt = rng.normal(size=(4, 4)) * 0.2

    def fn():
        cls, reg = head(x)
        a, b = box_head_loss(cls, reg * 10.0, labels, tgt)
        return a + b
    return fn, [x] + list(head.parameters())


def _mask_head(loss_mode):
    def build(rng):
        from .detector.heads import MaskHead
        from .detector.losses import mask_loss
        manual_seed(int(rng.integers(1 << 30)))
        head = MaskHead(3, 4, 2).astype(F64)
        for p in head.predictor.parameters():
            p.data = rng.normal(size=p.shape) * 0.3
        x = _t(rng, 2, 3, 6, 6)
        classes = np.array([1, 2])
        tgt = (rng.random((2, 12, 12)) < 0.5).astype(F64)
        return (lambda: mask_loss(head(x), classes, tgt, loss_mode)), [x] + list(head.parameters())
    return build


def _rpn_loss(rng):
    from .detector.losses import rpn_loss
    obj, deltas = _t(rng, 10), _t(rng, 10, 4)
    labels = np.array([1, 0, 0, 1, -1, 0, 0, 0, 1, 0])
    tgt = rng.normal(size=(10, 4)) * 0.3

    def fn():
        a, b = rpn_loss(obj, deltas, labels, tgt, np.array([0, 3, 8]), np.array([1, 2, 5, 9]), beta=0.1)
        return a + b
    return fn, [obj, deltas]


def _full_model(rng):
    from .backbone import BackboneConfig
    from .data.synthetic import SyntheticCellSpec, generate_one
    from .data.coco import normalize_image, training_target
    from .detector.model import FeatureConfig, HeadConfig, InstanceSegmenter, ModelConfig
    manual_seed(int(rng.integers(1 << 30)))
    cfg = ModelConfig(BackboneConfig(width_mult=0.25, depth_mult=0.3),
                      FeatureConfig(kind="fpn", channels=8),
                      HeadConfig(box_head_dim=16, mask_head_dim=8, rpn_batch=100000, roi_batch=100000,
                                 rpn_pre_nms_train=50, rpn_post_nms_train=20))
    model = InstanceSegmenter(cfg).astype(F64)
    rec = generate_one(SyntheticCellSpec(image_size=64, cell_count=(1, 2), nucleus_radius=(4, 6),
                                         cytoplasm_radius=(8, 12)), 0)
    images = normalize_image(rec.image())[None].astype(F64)
    target = training_target(rec)
    # proposals carry no gradient by design; freeze them so finite differences agree
    frozen = {}
    compute = model.proposals

    def proposals(obj, deltas, anchors, image_size, training):
        if "boxes" not in frozen:
            frozen["boxes"] = compute(obj, deltas, anchors, image_size, training)
        return frozen["boxes"]
    model.proposals = proposals

    def fn():
        losses, _ = model.forward_train(images, [target], np.random.default_rng(0))
        return sum(losses.values(), Tensor(np.zeros((), F64)))
    return fn, list(model.parameters())


PRIMITIVES = [
    GradCase("add", _binary(lambda a, b: a + b), PRIMITIVE_TOL),
    GradCase("mul", _binary(lambda a, b: a * b), PRIMITIVE_TOL),
    GradCase("div", _binary(lambda a, b: a / b), PRIMITIVE_TOL),
    GradCase("matmul", _matmul, PRIMITIVE_TOL),
    GradCase("reductions", _reductions, PRIMITIVE_TOL),
    GradCase("reshape_transpose", _shape_ops, PRIMITIVE_TOL),
    GradCase("getitem", _getitem, PRIMITIVE_TOL),
    GradCase("concat_split", _concat_split, PRIMITIVE_TOL),
    GradCase("exp", _unary(lambda x: x.exp()), PRIMITIVE_TOL),
    GradCase("log", _unary(lambda x: x.log(), low=0.5, high=3.0), PRIMITIVE_TOL),
    GradCase("sigmoid", _unary(lambda x: F.apply_activation(x, "sigmoid")), PRIMITIVE_TOL),
    GradCase("relu", _unary(lambda x: F.apply_activation(x, "relu")), PRIMITIVE_TOL),
    GradCase("swish", _unary(lambda x: F.apply_activation(x, "swish")), PRIMITIVE_TOL),
    GradCase("conv2d_dense_s2p1", _conv(2, 1, 1, 3), PRIMITIVE_TOL),
    GradCase("conv2d_1x1", _conv(1, 0, 1, 1), PRIMITIVE_TOL),
    GradCase("conv2d_k5", _conv(1, 2, 1, 5, bias=False), PRIMITIVE_TOL),
    GradCase("conv2d_depthwise_s1", _conv(1, 1, 4, 3, cout=4), PRIMITIVE_TOL),
    GradCase("conv2d_depthwise_s2k5", _conv(2, 2, 4, 5, cout=4), PRIMITIVE_TOL),
    GradCase("conv2d_grouped", _conv(1, 1, 2, 3), PRIMITIVE_TOL),
    GradCase("conv_transpose2d", _conv_transpose, PRIMITIVE_TOL),
    GradCase("pool_max", _pool("max"), PRIMITIVE_TOL),
    GradCase("pool_avg", _pool("avg"), PRIMITIVE_TOL),
    GradCase("pool_global_avg", _pool("global_avg"), PRIMITIVE_TOL),
    GradCase("pool_global_max", _pool("global_max"), PRIMITIVE_TOL),
    GradCase("batch_norm", _batch_norm, PRIMITIVE_TOL),
    GradCase("interpolate_nearest", _interp("nearest", (4, 3), (7, 5)), PRIMITIVE_TOL),
    GradCase("interpolate_bilinear", _interp("bilinear", (3, 4), (5, 7)), PRIMITIVE_TOL),
    GradCase("interpolate_area", _interp("area", (6, 6), (3, 3)), PRIMITIVE_TOL),
    GradCase("linear", _linear, PRIMITIVE_TOL),
    GradCase("losses_ce_bce_smoothl1", _losses, PRIMITIVE_TOL),
    GradCase("roi_align", _roi_align, PRIMITIVE_TOL),
    GradCase("dice_loss", _dice, PRIMITIVE_TOL),
]

COMPOSED = [
    GradCase("spatial_attention", _module_case(_sam, (1, 4, 8, 8)), COMPOSED_TOL),
    GradCase("squeeze_excite", _module_case(_se, (2, 8, 4, 4)), COMPOSED_TOL),
    GradCase("mbconv_sam", _module_case(_mbconv, (2, 8, 6, 6)), COMPOSED_TOL),
    GradCase("csp_stage", _module_case(_csp_stage, (2, 8, 8, 8)), COMPOSED_TOL),
    GradCase("merging_cell_sum", _merging_cell("sum"), COMPOSED_TOL),
    GradCase("merging_cell_gattn", _merging_cell("gattn"), COMPOSED_TOL),
    GradCase("rpn_head_loss", _rpn_loss, COMPOSED_TOL),
    GradCase("rpn_head", _rpn_head, COMPOSED_TOL),
    GradCase("box_head_loss", _box_head, COMPOSED_TOL),
    GradCase("mask_head_dice", _mask_head("dice"), COMPOSED_TOL),
    GradCase("mask_head_bce", _mask_head("bce"), COMPOSED_TOL),
    GradCase("full_model", _full_model, COMPOSED_TOL),
]


def run_case(case: GradCase, seed: int = 0, n_samples: int = 20) -> GradOutcome:
    rng = np.random.default_rng(seed)
    fn, tensors = case.build(rng)
    err = check_gradients(fn, tensors, n_samples=n_samples, rng=np.random.default_rng(seed + 1))
    return GradOutcome(case.name, err, case.tol)


def run_suite(seed: int = 0, n_samples: int = 20, cases=None) -> list[GradOutcome]:
    cases = PRIMITIVES + COMPOSED if cases is None else cases
    return [run_case(c, seed, n_samples) for c in cases]
