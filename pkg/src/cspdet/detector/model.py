"""The assembled two-stage instance segmenter."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..backbone import Backbone, BackboneConfig
from ..errors import InvalidArgument
from ..feature_network import FeatureNetwork, load_topology
from ..tensor.core import Tensor, getitem, no_grad
from ..tensor.nn import Module
from .anchors import DEFAULT_RATIOS, DEFAULT_SCALES, AnchorSet, generate_anchors
from .boxes import clip_boxes, decode_boxes, nms
from .heads import BoxHead, MaskHead, RPNHead, softmax_scores
from .losses import box_head_loss, mask_loss, rpn_loss, select_class_channel
from .postprocess import BOX_WEIGHTS, Detection, postprocess
from .roi_align import multilevel_roi_align, roi_align
from .targets import assign_targets, sample_labels


@dataclass
class FeatureConfig:
    kind: str = "nasfpn"          # c4 | fpn | nasfpn
    channels: int = 256
    topology: str | None = None   # path to a merging-cell file; None = bundled default


@dataclass
class HeadConfig:
    num_classes: int = 1
    mask_loss: str = "dice"
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_det: int = 100
    box_head_dim: int = 1024
    mask_head_dim: int = 256
    anchor_base: float = 32.0
    anchor_ratios: tuple = DEFAULT_RATIOS
    anchor_scales: tuple = DEFAULT_SCALES
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_nms: float = 0.7
    rpn_pre_nms_train: int = 2000
    rpn_post_nms_train: int = 1000
    rpn_pre_nms_test: int = 1000
    rpn_post_nms_test: int = 1000
    roi_batch: int = 128
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.5
    mask_size: int = 28


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes (objective and thresholds excluded)."""
        bb = self.backbone
        return {
            "backbone": {"variant": bb.variant, "use_sam": bb.use_sam, "use_csp": bb.use_csp,
                         "width_mult": bb.width_mult, "depth_mult": bb.depth_mult,
                         "se_ratio": bb.se_ratio, "csp_split": bb.csp_split},
            "feature": {"kind": self.feature.kind, "channels": self.feature.channels,
                        "cells": [asdict(c) for c in load_topology(self.feature.topology)]
                        if self.feature.kind == "nasfpn" else None},
            "heads": {"num_classes": self.heads.num_classes, "box_head_dim": self.heads.box_head_dim,
                      "mask_head_dim": self.heads.mask_head_dim,
                      "anchors_per_location": self.anchors_per_location()},
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def anchor_scales(self) -> tuple:
        scales = tuple(self.heads.anchor_scales)
        if self.feature.kind == "c4":
            # one stride-16 grid carries the sizes of levels 3-5
            return tuple(s * f for f in (0.5, 1.0, 2.0) for s in scales)
        return scales

    def anchors_per_location(self) -> int:
        return len(self.heads.anchor_ratios) * len(self.anchor_scales())


class InstanceSegmenter(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        h = cfg.heads
        if h.mask_loss not in ("bce", "dice"):
            raise InvalidArgument(f"heads.mask_loss must be bce or dice, got {h.mask_loss!r}")
        if h.num_classes < 1:
            raise InvalidArgument("heads.num_classes must be >= 1")
        ch = cfg.feature.channels
        self.backbone = Backbone(cfg.backbone, levels=(4,) if cfg.feature.kind == "c4" else (3, 4, 5))
        topology = load_topology(cfg.feature.topology) if cfg.feature.kind == "nasfpn" else None
        self.neck = FeatureNetwork(cfg.feature.kind, cfg.backbone.tap_channels(), ch, topology)
        self.rpn = RPNHead(ch, cfg.anchors_per_location())
        self.box_head = BoxHead(ch, 7, h.box_head_dim, h.num_classes)
        self.mask_head = MaskHead(ch, h.mask_head_dim, h.num_classes)
        self._anchor_cache: dict = {}

    # -- shared pieces -------------------------------------------------------------
    def features(self, images) -> dict[int, Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        return self.neck(self.backbone(x))

    def anchors(self, pyramid: dict[int, Tensor]) -> AnchorSet:
        shapes = tuple((lvl, tuple(t.shape[2:])) for lvl, t in sorted(pyramid.items()))
        if shapes not in self._anchor_cache:
            h = self.cfg.heads
            base_level = 3
            base = h.anchor_base
            if self.cfg.feature.kind == "c4":
                base_level, base = 4, h.anchor_base * 2
            self._anchor_cache[shapes] = generate_anchors(dict(shapes), base, h.anchor_ratios,
                                                          self.cfg.anchor_scales(), base_level)
        return self._anchor_cache[shapes]

    def _roi_levels(self, pyramid):
        return tuple(lvl for lvl in (3, 4, 5) if lvl in pyramid)

    def proposals(self, objectness: np.ndarray, deltas: np.ndarray, anchors: AnchorSet,
                  image_size: tuple[int, int], training: bool) -> np.ndarray:
        """Top-scoring decoded anchors after NMS for one image (no gradient)."""
        h = self.cfg.heads
        pre = h.rpn_pre_nms_train if training else h.rpn_pre_nms_test
        post = h.rpn_post_nms_train if training else h.rpn_post_nms_test
        picks = []
        for lvl in np.unique(anchors.levels):
            idx = np.flatnonzero(anchors.levels == lvl)
            top = idx[np.argsort(-objectness[idx], kind="stable")[:pre]]
            picks.append(top)
        idx = np.concatenate(picks)
        boxes = decode_boxes(anchors.boxes[idx], deltas[idx], image_size=image_size)
        scores = objectness[idx]
        ok = ((boxes[:, 2] - boxes[:, 0]) > 1e-3) & ((boxes[:, 3] - boxes[:, 1]) > 1e-3)
        boxes, scores = boxes[ok], scores[ok]
        keep = nms(boxes, scores, h.rpn_nms)[:post]
        return boxes[keep]

    # -- training ----------------------------------------------------------------------
    def forward_train(self, images, targets: list[dict], rng: np.random.Generator):
        """Return ({loss name: scalar Tensor}, stats) for one batch.

        Each target dict carries ``boxes`` (G, 4), ``classes`` (G,) in 1..C
        and ``masks`` (G, H, W) boolean.
        """
        h = self.cfg.heads
        stats: dict = {}
        pyramid = self.features(images)
        n, _, ih, iw = (images.shape if not isinstance(images, Tensor) else images.shape)
        anchors = self.anchors(pyramid)
        obj, deltas = self.rpn(pyramid)
        obj_np, deltas_np = obj.data, deltas.data

        rpn_cls, rpn_box = [], []
        rois, roi_batch, roi_labels, roi_deltas, roi_gt = [], [], [], [], []
        for i, tgt in enumerate(targets):
            gt_boxes = np.asarray(tgt["boxes"], dtype=np.float64).reshape(-1, 4)
            a = assign_targets(anchors.boxes, gt_boxes, h.rpn_pos_iou, h.rpn_neg_iou, True)
            pos, neg = sample_labels(a.labels, h.rpn_batch, h.rpn_pos_fraction, rng)
            c, b = rpn_loss(obj[i], deltas[i], a.labels, a.deltas, pos, neg, stats=stats)
            rpn_cls.append(c)
            rpn_box.append(b)

            props = self.proposals(obj_np[i], deltas_np[i], anchors, (ih, iw), training=True)
            if len(gt_boxes):
                props = np.concatenate([props, gt_boxes])
            m = assign_targets(props, gt_boxes, h.roi_pos_iou, h.roi_neg_iou, False, BOX_WEIGHTS)
            p_idx, n_idx = sample_labels(m.labels, h.roi_batch, h.roi_pos_fraction, rng)
            sel = np.concatenate([p_idx, n_idx])
            labels = np.zeros(len(sel), dtype=np.int64)
            if len(p_idx):
                labels[:len(p_idx)] = np.asarray(tgt["classes"])[m.matched[p_idx]]
            rois.append(props[sel])
            roi_batch.append(np.full(len(sel), i))
            roi_labels.append(labels)
            roi_deltas.append(m.deltas[sel])
            roi_gt.append(np.concatenate([m.matched[p_idx], np.full(len(n_idx), -1)]))

        rois = np.concatenate(rois)
        roi_batch = np.concatenate(roi_batch)
        roi_labels = np.concatenate(roi_labels)
        roi_deltas = np.concatenate(roi_deltas)
        roi_gt = np.concatenate(roi_gt)
        levels = self._roi_levels(pyramid)

        pooled = multilevel_roi_align(pyramid, rois, roi_batch, (7, 7), 2, levels, stats)
        cls_logits, box_deltas = self.box_head(pooled)
        box_cls, box_reg = box_head_loss(cls_logits, box_deltas, roi_labels, roi_deltas)

        pos = np.flatnonzero(roi_labels > 0)
        stats["positive_rois"] = int(len(pos))
        mask_feats = multilevel_roi_align(pyramid, rois[pos], roi_batch[pos], (14, 14), 2, levels, stats)
        mask_logits = self.mask_head(mask_feats)
        mask_targets = self._mask_targets(targets, rois[pos], roi_batch[pos], roi_gt[pos])
        m_loss = mask_loss(mask_logits, roi_labels[pos], mask_targets, h.mask_loss, stats)

        losses = {
            "rpn_cls": _mean(rpn_cls), "rpn_box": _mean(rpn_box),
            "box_cls": box_cls, "box_reg": box_reg, "mask": m_loss,
        }
        return losses, stats

    def _mask_targets(self, targets, rois, batch, gt_index) -> np.ndarray:
        m = self.cfg.heads.mask_size
        out = np.zeros((len(rois), m, m), dtype=np.float32)
        for i in np.unique(batch):
            sel = np.flatnonzero(batch == i)
            masks = np.asarray(targets[i]["masks"], dtype=np.float32)
            stack = Tensor(masks[:, None])
            with no_grad():
                crops = roi_align(stack, rois[sel], gt_index[sel], 1.0, (m, m), 2)
            out[sel] = crops.data[:, 0] >= 0.5
        return out

    # -- inference ---------------------------------------------------------------------
    def predict(self, images) -> list[list[Detection]]:
        h = self.cfg.heads
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                imgs = np.asarray(images.data if isinstance(images, Tensor) else images)
                n, _, ih, iw = imgs.shape
                pyramid = self.features(imgs)
                anchors = self.anchors(pyramid)
                obj, deltas = self.rpn(pyramid)
                levels = self._roi_levels(pyramid)
                results = []
                for i in range(n):
                    props = self.proposals(obj.data[i], deltas.data[i], anchors, (ih, iw), training=False)
                    if len(props) == 0:
                        results.append([])
                        continue
                    bidx = np.full(len(props), i)
                    pooled = multilevel_roi_align(pyramid, props, bidx, (7, 7), 2, levels)
                    logits, box_deltas = self.box_head(pooled)
                    scores = softmax_scores(logits)

                    def mask_probs(boxes, classes, i=i):
                        feats = multilevel_roi_align(pyramid, boxes, np.full(len(boxes), i), (14, 14), 2, levels)
                        chosen = select_class_channel(self.mask_head(feats), classes)
                        return chosen.sigmoid().data.astype(np.float64)

                    results.append(postprocess(props, scores, box_deltas.data.astype(np.float64), mask_probs,
                                               (ih, iw), h.score_thresh, h.nms_thresh, h.max_det))
                return results
        finally:
            self.train(was_training)


def _mean(items):
    total = items[0]
    for t in items[1:]:
        total = total + t
    return total * (1.0 / len(items))
