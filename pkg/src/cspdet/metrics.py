"""COCO-style box/mask average precision and instance mIoU."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector.boxes import box_iou
from .errors import InvalidArgument

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def iou(a: np.ndarray, b: np.ndarray, stats: dict | None = None) -> float:
    """IoU of two boxes (length-4) or two same-shape binary masks.

    Two empty masks have IoU 0; that case is counted in ``stats``.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 1 and a.shape == (4,) and b.shape == (4,):
        return float(box_iou(a[None], b[None])[0, 0])
    if a.shape != b.shape:
        raise InvalidArgument(f"incompatible shapes {a.shape} and {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        if stats is not None:
            stats["empty_union"] = stats.get("empty_union", 0) + 1
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(dets: np.ndarray, gts: np.ndarray, crowd: np.ndarray | None = None) -> np.ndarray:
    """(D, G) mask IoU.  For crowd columns the denominator is the detection area."""
    d = dets.reshape(len(dets), -1).astype(np.float32)
    g = gts.reshape(len(gts), -1).astype(np.float32)
    # integer pixel counts are exact in float32; divide in float64
    inter = (d @ g.T).astype(np.float64)
    da, ga = d.sum(1, dtype=np.float64)[:, None], g.sum(1, dtype=np.float64)[None, :]
    union = da + ga - inter
    if crowd is not None and len(crowd):
        union = np.where(np.asarray(crowd, bool)[None, :], da, union)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def box_iou_matrix(dets: np.ndarray, gts: np.ndarray, crowd: np.ndarray | None = None) -> np.ndarray:
    out = box_iou(dets, gts)
    if crowd is not None and np.any(crowd):
        d = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
        g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        lt = np.maximum(d[:, None, :2], g[None, :, :2])
        rb = np.minimum(d[:, None, 2:], g[None, :, 2:])
        inter = np.prod(np.clip(rb - lt, 0, None), axis=2)
        area = np.prod(np.clip(d[:, 2:] - d[:, :2], 0, None), axis=1)[:, None]
        over_det = np.where(area > 0, inter / np.where(area > 0, area, 1), 0.0)
        out = np.where(np.asarray(crowd, bool)[None, :], over_det, out)
    return out


@dataclass
class MatchResult:
    tp: np.ndarray          # (D,) bool
    ignored: np.ndarray     # (D,) bool, matched to a crowd region
    matched: np.ndarray     # (D,) GT index or -1


def match_detections(iou_matrix: np.ndarray, threshold: float, crowd: np.ndarray | None = None) -> MatchResult:
    """Greedy matching of score-sorted detections (rows) to ground truths (columns).

    Each detection takes the highest-IoU still-unmatched regular GT at or
    above ``threshold``; ties go to the lower GT index.  Failing that, a crowd
    GT at or above threshold absorbs it (ignored, not consumed).
    """
    iou_matrix = np.asarray(iou_matrix, dtype=np.float64)
    n_det, n_gt = iou_matrix.shape
    crowd = np.zeros(n_gt, bool) if crowd is None else np.asarray(crowd, bool)
    taken = np.zeros(n_gt, bool)
    tp = np.zeros(n_det, bool)
    ignored = np.zeros(n_det, bool)
    matched = np.full(n_det, -1)
    for d in range(n_det):
        row = iou_matrix[d]
        cand = np.where(~crowd & ~taken & (row >= threshold), row, -1.0)
        if n_gt and cand.max() >= 0:
            g = int(np.argmax(cand))
            taken[g] = True
            tp[d] = True
            matched[d] = g
            continue
        cand = np.where(crowd & (row >= threshold), row, -1.0)
        if n_gt and cand.max() >= 0:
            ignored[d] = True
            matched[d] = int(np.argmax(cand))
    return MatchResult(tp, ignored, matched)


def average_precision(tp_flags, scores, n_gt: int) -> float | None:
    """101-point interpolated AP of a ranked detection list.

    Returns None when there is nothing to measure (no ground truth and no
    detections).  With no ground truth but some detections AP is 0.
    """
    tp_flags = np.asarray(tp_flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if n_gt == 0:
        return None if len(tp_flags) == 0 else 0.0
    if len(tp_flags) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalResult:
    box_ap: float | None
    mask_ap: float | None
    miou: float | None
    box_ap_per_threshold: dict[str, float | None]
    mask_ap_per_threshold: dict[str, float | None]
    per_class: dict[str, dict[str, float | None]]
    counts: dict[str, int]
    flags: list[str] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.box_ap is not None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        return cls(**json.loads(text))

    def table(self) -> str:
        """Fixed-width summary with the same rounding as :meth:`rounded`."""
        r = self.rounded()
        head = f"{'BoxAP':>8} {'MaskAP':>8} {'mIOU':>8} {'AP50box':>8} {'AP50mask':>9}"
        vals = [r["box_ap"], r["mask_ap"], r["miou"], r["box_ap50"], r["mask_ap50"]]
        cells = [_fmt(v, w) for v, w in zip(vals, (8, 8, 8, 8, 9))]
        return head + "\n" + " ".join(cells)

    def rounded(self, digits: int = 4) -> dict[str, float | None]:
        def rd(v):
            return None if v is None else round(v, digits)
        return {"box_ap": rd(self.box_ap), "mask_ap": rd(self.mask_ap), "miou": rd(self.miou),
                "box_ap50": rd(self.box_ap_per_threshold.get("0.5")),
                "mask_ap50": rd(self.mask_ap_per_threshold.get("0.5"))}


def _fmt(v, width: int) -> str:
    return f"{'n/a':>{width}}" if v is None else f"{v:>{width}.4f}"


def parse_table(text: str) -> dict[str, float | None]:
    """Read back the values printed by :meth:`EvalResult.table`."""
    vals = text.strip().splitlines()[-1].split()
    keys = ("box_ap", "mask_ap", "miou", "box_ap50", "mask_ap50")
    return {k: None if v == "n/a" else float(v) for k, v in zip(keys, vals)}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(detections, ground_truths, num_classes: int | None = None,
             thresholds=IOU_THRESHOLDS, max_det: int = MAX_DETECTIONS) -> EvalResult:
    """Score per-image detection lists against per-image annotation lists.

    Detections need ``box``, ``class_id``, ``score`` and ``mask``; ground
    truths need ``bbox``, ``class_id``, ``mask`` and ``iscrowd``.
    """
    if len(detections) != len(ground_truths):
        raise InvalidArgument("detections and ground truths must cover the same images")
    classes = sorted({g.class_id for gts in ground_truths for g in gts}
                     | {d.class_id for dets in detections for d in dets}
                     | (set(range(1, num_classes + 1)) if num_classes else set()))
    n_regular = sum(1 for gts in ground_truths for g in gts if not g.iscrowd)
    n_dets = sum(len(d) for d in detections)
    flags = []
    if n_regular == 0:
        flags.append("no_ground_truth")
        return EvalResult(None, None, None, {str(t): None for t in thresholds}, {str(t): None for t in thresholds},
                          {}, {"tp": 0, "fp": n_dets, "fn": 0}, flags)

    # per (kind, class, threshold): flags and scores gathered across images
    pools = {(k, c, t): ([], []) for k in ("box", "mask") for c in classes for t in thresholds}
    n_gt = {c: 0 for c in classes}
    miou_terms = []
    counts = {"tp": 0, "fp": 0, "fn": 0}
    for dets, gts in zip(detections, ground_truths):
        dets = sorted(dets, key=lambda d: -d.score)[:max_det]
        # instance mIoU: every regular GT, matched class-aware at mask IoU 0.5
        for c in classes:
            cd = [d for d in dets if d.class_id == c]
            cg = [g for g in gts if g.class_id == c]
            crowd = np.array([g.iscrowd for g in cg], dtype=bool)
            n_gt[c] += int((~crowd).sum())
            scores = np.array([d.score for d in cd])
            if cd and cg:
                biou = box_iou_matrix(np.array([d.box for d in cd]), np.array([g.bbox for g in cg]), crowd)
                miou_mat = mask_iou_matrix(np.stack([d.mask for d in cd]), np.stack([g.mask for g in cg]), crowd)
            else:
                biou = miou_mat = np.zeros((len(cd), len(cg)))
            for t in thresholds:
                for kind, mat in (("box", biou), ("mask", miou_mat)):
                    m = match_detections(mat, t, crowd)
                    keep = ~m.ignored
                    pools[(kind, c, t)][0].append(m.tp[keep])
                    pools[(kind, c, t)][1].append(scores[keep] if len(scores) else scores)
            m50 = match_detections(miou_mat, 0.5, crowd)
            plain = mask_iou_matrix(np.stack([d.mask for d in cd]), np.stack([g.mask for g in cg])) \
                if cd and cg else np.zeros((len(cd), len(cg)))
            for gi in np.flatnonzero(~crowd):
                hit = np.flatnonzero(m50.tp & (m50.matched == gi))
                miou_terms.append(float(plain[hit[0], gi]) if hit.size else 0.0)
            counts["tp"] += int(m50.tp.sum())
            counts["fp"] += int((~m50.tp & ~m50.ignored).sum())
            counts["fn"] += int((~crowd).sum()) - int(m50.tp.sum())

    per_threshold = {"box": {}, "mask": {}}
    per_class = {str(c): {} for c in classes}
    for kind in ("box", "mask"):
        class_means = {c: [] for c in classes}
        for t in thresholds:
            aps = []
            for c in classes:
                tp_list, sc_list = pools[(kind, c, t)]
                tp = np.concatenate(tp_list) if tp_list else np.zeros(0, bool)
                sc = np.concatenate(sc_list) if sc_list else np.zeros(0)
                ap = average_precision(tp, sc, n_gt[c])
                if n_gt[c] == 0:
                    ap = None   # classes absent from the ground truth do not enter the average
                aps.append(ap)
                class_means[c].append(ap)
            per_threshold[kind][str(t)] = _mean(aps)
        for c in classes:
            per_class[str(c)][f"{kind}_ap"] = _mean(class_means[c])
    if n_dets == 0:
        flags.append("no_detections")
        miou = None
    else:
        miou = float(np.mean(miou_terms))
    return EvalResult(_mean(per_threshold["box"].values()), _mean(per_threshold["mask"].values()), miou,
                      per_threshold["box"], per_threshold["mask"], per_class, counts, flags)
