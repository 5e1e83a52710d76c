"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Criteria 6-8 share one set of training runs on the desk setup below, built
once per session.  They take roughly an hour on a single CPU core.
"""
import time

import numpy as np
import pytest

from cspdet.backbone import Backbone, BackboneConfig, CSPStage, stage_macs
from cspdet.config import ablation_grid
from cspdet.data import SyntheticCellSpec, generate_synthetic
from cspdet.data.coco import normalize_image, training_target
from cspdet.data.rle import rle_decode, rle_encode, rle_from_string, rle_to_string
from cspdet.detector.boxes import nms
from cspdet.detector.losses import dice_coefficient, dice_loss
from cspdet.detector.model import FeatureConfig, HeadConfig, InstanceSegmenter, ModelConfig
from cspdet.detector.postprocess import Detection
from cspdet.detector.roi_align import roi_align
from cspdet.gradsuite import COMPOSED, COMPOSED_TOL, PRIMITIVE_TOL, PRIMITIVES, run_case
from cspdet.metrics import IOU_THRESHOLDS, evaluate
from cspdet.tensor import functional as F
from cspdet.tensor.core import Tensor
from cspdet.tensor.nn import manual_seed
from cspdet.trainer import TrainConfig, Trainer, total_loss

from conftest import acceptance_line
from oracles import ap_reference, naive_conv2d, nms_reference, pair_iou, roi_align_direct

CASES = 100

# desk setup for the training criteria (see the README for why these sizes)
DESK_IMAGES = 8
DESK_BUDGET = 500          # equal per-run budget for the loss comparison
DESK_MAX_STEPS = 2000
DESK_EVAL_EVERY = 250
DESK_SEEDS = (0, 1, 2)
PREFIX_STEPS = 100


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- 1 ---------------------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    failures, sizes = [], []
    for cases, tol in ((PRIMITIVES, 1e-4), (COMPOSED, 1e-3)):
        assert (PRIMITIVE_TOL if cases is PRIMITIVES else COMPOSED_TOL) <= tol
        for case in cases:
            _, tensors = case.build(np.random.default_rng(0))
            sizes.append(sum(t.size for t in tensors))
            assert all(t.dtype == np.float64 for t in tensors), case.name
            out = run_case(case, seed=0, n_samples=20)
            if not out.error < tol:
                failures.append(f"{case.name} err={out.error:.1e}")
    elapsed = time.time() - t0
    names = {c.name for c in COMPOSED}
    ok = (not failures and min(sizes) >= 20 and elapsed < 300
          and {"spatial_attention", "mask_head_dice", "full_model"} <= names)
    detail = (f"{len(PRIMITIVES)} primitives at 1e-4, {len(COMPOSED)} composed at 1e-3, 20 coordinates each, "
              f"{elapsed:.0f}s" + (f"; failing: {', '.join(failures)}" if failures else ""))
    assert acceptance_line(1, "gradient suite", ok, detail)


# -- 2 ---------------------------------------------------------------------------------------

def test_criterion_2_dice_fidelity():
    r = np.random.default_rng(2)
    worst_identity, bitwise = 0.0, True
    for _ in range(CASES):
        m = r.random((int(r.integers(1, 30)), int(r.integers(1, 30)))) < r.random()
        worst_identity = max(worst_identity, abs(float(dice_coefficient(t64(m), m).data) - 1.0))
        p = r.random(m.shape)
        bitwise &= dice_loss(t64(p), m).data.tobytes() == (-dice_coefficient(t64(p), m).data).tobytes()
    hand = float(dice_coefficient(t64(np.ones((2, 2))), np.array([[1, 1], [0, 0]])).data)
    ok = worst_identity <= 1e-6 and bitwise and abs(hand - 2 / 3) <= 1e-6
    detail = f"identity off by {worst_identity:.1e}, loss is negated coefficient bitwise: {bitwise}, hand case {hand:.9f}"
    assert acceptance_line(2, "dice coefficient and loss", ok, detail)


# -- 3 ---------------------------------------------------------------------------------------

def rect(box, size=64):
    m = np.zeros((size, size), bool)
    x1, y1, x2, y2 = (int(v) for v in box)
    m[y1:y2, x1:x2] = True
    return m


def toy_corpus(r=None):
    """The three-image toy corpus; with ``r`` its boxes are jittered and its scores redrawn."""
    det_boxes = [[[0, 0, 10, 10], [21, 21, 31, 31]], [[0, 0, 20, 10], [40, 40, 50, 50]], []]
    gt_boxes = [[[0, 0, 10, 10], [20, 20, 30, 30]], [[0, 0, 20, 20]], [[5, 5, 15, 15]]]
    scores = [[0.9, 0.8], [0.7, 0.6], []]
    if r is not None:
        def jitter(b):
            x1, y1 = np.clip(np.array(b[:2]) + r.integers(-4, 5, 2), 0, 50)
            x2, y2 = np.clip(np.array(b[2:]) + r.integers(-4, 5, 2), [x1 + 1, y1 + 1], 64)
            return [int(x1), int(y1), int(x2), int(y2)]
        det_boxes = [[jitter(b) for b in img] + [jitter(b) for b in img[:int(r.integers(0, 2))]] for img in det_boxes]
        gt_boxes = [[jitter(b) for b in img] for img in gt_boxes]
        flat = r.permutation(np.linspace(0.05, 0.95, sum(map(len, det_boxes))))
        it = iter(flat)
        scores = [[float(next(it)) for _ in img] for img in det_boxes]
    from cspdet.data.coco import InstanceAnnotation
    dets = [[Detection(np.asarray(b, float), 1, s, rect(b)) for b, s in zip(bs, ss)]
            for bs, ss in zip(det_boxes, scores)]
    gts = [[InstanceAnnotation(1, np.asarray(b, float), rect(b), 64, 64, False) for b in bs] for bs in gt_boxes]
    return det_boxes, scores, gt_boxes, dets, gts


def spreadsheet_ap(det_boxes, scores, gt_boxes):
    """Per-threshold greedy matching by hand, then the 101-point interpolation oracle."""
    flat = sorted(((s, i, b) for i, (bs, ss) in enumerate(zip(det_boxes, scores)) for b, s in zip(bs, ss)),
                  key=lambda t: -t[0])
    n_gt = sum(map(len, gt_boxes))
    aps = []
    for t in IOU_THRESHOLDS:
        taken, flags = set(), []
        for s, i, b in flat:
            best, pick = -1.0, None
            for j, g in enumerate(gt_boxes[i]):
                v = pair_iou(b, g)
                if (i, j) not in taken and v >= t and v > best:
                    best, pick = v, (i, j)
            if pick is not None:
                taken.add(pick)
            flags.append(pick is not None)
        aps.append(ap_reference(flags, [f[0] for f in flat], n_gt))
    return float(np.mean(aps))


def test_criterion_3_oracle_equivalences():
    r = np.random.default_rng(3)
    conv_err = 0.0
    for _ in range(CASES):
        groups = int(r.choice([1, 2, 4]))
        cin, cout, k = 4, int(r.choice([4, 8])), int(r.choice([1, 3, 5]))
        stride, padding = int(r.integers(1, 3)), int(r.integers(0, k // 2 + 1))
        x = r.normal(size=(int(r.integers(1, 3)), cin, int(r.integers(k, 12)), int(r.integers(k, 12))))
        w, b = r.normal(size=(cout, cin // groups, k, k)), r.normal(size=cout)
        got = F.conv2d(t64(x), t64(w), t64(b), stride, padding, groups).data
        conv_err = max(conv_err, float(np.abs(got - naive_conv2d(x, w, b, stride, padding, groups)).max()))

    nms_exact = 0
    for _ in range(CASES):
        n = int(r.integers(1, 80))
        xy = r.uniform(0, 80, size=(n, 2))
        boxes = np.concatenate([xy, xy + r.uniform(1, 40, size=(n, 2))], axis=1)
        scores = np.round(r.random(n), 1)
        thresh = float(r.choice([0.3, 0.5, 0.7]))
        nms_exact += list(nms(boxes, scores, thresh)) == nms_reference(boxes.tolist(), scores.tolist(), thresh)

    roi_err = 0.0
    for _ in range(CASES):
        feat = r.normal(size=(2, 3, int(r.integers(4, 12)), int(r.integers(4, 12))))
        scale = float(r.choice([1.0, 0.5, 0.25]))
        n = int(r.integers(1, 6))
        xy = r.uniform(-2, feat.shape[3] / scale, size=(n, 2))
        rois = np.concatenate([xy, xy + r.uniform(0.2, 10 / scale, size=(n, 2))], axis=1)
        bidx = r.integers(0, 2, size=n)
        out_hw = (int(r.integers(1, 5)), int(r.integers(1, 5)))
        sampling = int(r.integers(1, 3))
        got = roi_align(t64(feat), rois, bidx, scale, out_hw, sampling).data
        roi_err = max(roi_err, float(np.abs(got - roi_align_direct(feat, rois, bidx, scale, out_hw, sampling)).max()))

    ap_err = 0.0
    for case in range(CASES):
        det_boxes, scores, gt_boxes, dets, gts = toy_corpus(None if case == 0 else r)
        res = evaluate(dets, gts, num_classes=1)
        want = spreadsheet_ap(det_boxes, scores, gt_boxes)
        if case == 0:
            assert want == pytest.approx(385 / 1010, abs=1e-12)
        ap_err = max(ap_err, abs(res.box_ap - want), abs(res.mask_ap - want))

    rle_exact = 0
    for _ in range(CASES):
        h, w = int(r.integers(1, 40)), int(r.integers(1, 40))
        m = r.random((h, w)) < r.random()
        counts = rle_encode(m)
        rle_exact += (np.array_equal(rle_decode(counts, h, w), m)
                      and rle_from_string(rle_to_string(counts)) == counts)

    ok = (conv_err <= 1e-5 and nms_exact == CASES and roi_err <= 1e-5 and ap_err <= 1e-9 and rle_exact == CASES)
    detail = (f"{CASES} cases each; conv2d max err {conv_err:.1e}, NMS exact {nms_exact}/{CASES}, "
              f"RoIAlign max err {roi_err:.1e}, toy-corpus AP max err {ap_err:.1e}, RLE exact {rle_exact}/{CASES}")
    assert acceptance_line(3, "oracle equivalences", ok, detail)


# -- 4 ---------------------------------------------------------------------------------------

def test_criterion_4_csp_efficiency():
    t0 = time.time()
    plain_cfg, csp_cfg = BackboneConfig(use_csp=False), BackboneConfig(use_csp=True)
    plain, csp = stage_macs(plain_cfg, 256), stage_macs(csp_cfg, 256)
    kinds = [isinstance(s, CSPStage) for s in Backbone(csp_cfg).stages]
    reductions = [1 - c / p for p, c, is_csp in zip(plain, csp, kinds) if is_csp]
    params = Backbone(plain_cfg).num_parameters(), Backbone(csp_cfg).num_parameters()
    elapsed = time.time() - t0
    ok = (sum(csp) < sum(plain) and all(0.10 <= x <= 0.60 for x in reductions) and len(reductions) >= 6
          and params[1] < params[0] and elapsed < 10)
    detail = (f"MACs {sum(csp):,} vs {sum(plain):,}, per-stage reduction "
              f"{', '.join(f'{x:.0%}' for x in reductions)}, params {params[1]:,} vs {params[0]:,}, {elapsed:.1f}s")
    assert acceptance_line(4, "CSP efficiency", ok, detail)


# -- 5 ---------------------------------------------------------------------------------------

def test_criterion_5_ablation_grid():
    t0 = time.time()
    record = generate_synthetic(SyntheticCellSpec(seed=5), 1)[0]
    images, targets = normalize_image(record.image())[None], [training_target(record)]
    problems, fingerprints, counts = [], {}, {}
    for key, cfg in ablation_grid():
        manual_seed(0)
        model = InstanceSegmenter(cfg).train()
        losses, _ = model.forward_train(images, targets, np.random.default_rng(0))
        total_loss(losses, {}).backward()
        grads_finite = all(p.grad is None or np.isfinite(p.grad).all() for p in model.parameters())
        if not (all(np.isfinite(v.data) for v in losses.values()) and grads_finite):
            problems.append(str(key))
        fingerprints[key], counts[key] = cfg.fingerprint(), model.num_parameters()
    same_for_loss = all(fingerprints[(s, c, k, "bce")] == fingerprints[(s, c, k, "dice")]
                        and counts[(s, c, k, "bce")] == counts[(s, c, k, "dice")]
                        for s, c, k, _ in fingerprints)
    differ = all(fingerprints[(s, c, k, l)] != fingerprints[(not s, c, k, l)]
                 and fingerprints[(s, c, k, l)] != fingerprints[(s, not c, k, l)]
                 and counts[(s, c, k, l)] != counts[(not s, c, k, l)]
                 and counts[(s, c, k, l)] != counts[(s, not c, k, l)]
                 for s, c, k, l in fingerprints)
    elapsed = time.time() - t0
    ok = len(fingerprints) == 24 and not problems and same_for_loss and differ and elapsed < 300
    detail = (f"{len(fingerprints)} configs stepped, non-finite in {problems or 'none'}, "
              f"loss toggle shares fingerprint: {same_for_loss}, SAM/CSP toggles change it: {differ}, {elapsed:.0f}s")
    assert acceptance_line(5, "ablation grid", ok, detail)


# -- 6, 7, 8: training on the desk setup ------------------------------------------------------

def desk_model(mask_loss: str) -> ModelConfig:
    return ModelConfig(feature=FeatureConfig(kind="nasfpn", channels=64),
                       heads=HeadConfig(mask_loss=mask_loss, box_head_dim=256, mask_head_dim=64,
                                        rpn_pre_nms_train=1000, rpn_post_nms_train=500,
                                        rpn_pre_nms_test=500, rpn_post_nms_test=200))


def desk_train(seed: int, max_steps: int) -> TrainConfig:
    return TrainConfig(lr=0.02, batch_size=1, warmup_steps=100, max_steps=max_steps, seed=seed,
                       eval_every=DESK_EVAL_EVERY, checkpoint_every=0)


def capacity_met(result) -> bool:
    return result.miou is not None and result.miou >= 0.7 and result.mask_ap_per_threshold["0.5"] >= 0.6


@pytest.fixture(scope="module")
def desk_records():
    return generate_synthetic(SyntheticCellSpec(image_size=256, seed=0), DESK_IMAGES)


@pytest.fixture(scope="module")
def desk_runs(desk_records):
    """Every (mask loss, seed) run trained for the equal budget, with its evaluations."""
    runs = {}
    for loss in ("dice", "bce"):
        for seed in DESK_SEEDS:
            t0 = time.time()
            trainer = Trainer(desk_model(loss), desk_train(seed, DESK_BUDGET), desk_records)
            trainer.run()
            runs[loss, seed] = dict(trainer=trainer, history=list(trainer.history), seconds=time.time() - t0,
                                    final=trainer.evaluate())
    return runs


def evals_of(history):
    return [(r["step"] + 1, r["eval"]) for r in history if "eval" in r]


def test_criterion_6_end_to_end_capacity(desk_runs):
    run = desk_runs["dice", 0]
    trainer, seconds = run["trainer"], run["seconds"]
    hit = next(((step, e) for step, e in evals_of(run["history"])
                if e["miou"] is not None and e["miou"] >= 0.7 and e["mask_ap_per_threshold"]["0.5"] >= 0.6), None)
    if hit is None:
        # keep training the same run up to the step cap, stopping at the first evaluation that meets both bounds
        t0 = time.time()
        trainer.run(max_steps=DESK_MAX_STEPS, stop=lambda step, res: capacity_met(res))
        seconds += time.time() - t0
        hit = next(((step, e) for step, e in evals_of(trainer.history)
                    if e["miou"] is not None and e["miou"] >= 0.7 and e["mask_ap_per_threshold"]["0.5"] >= 0.6), None)
    if hit is None:
        step, e = evals_of(trainer.history)[-1]
    else:
        step, e = hit
    per_step = seconds / trainer.step
    ok = hit is not None and step <= DESK_MAX_STEPS
    detail = (f"train mIoU {e['miou']:.3f}, MaskAP@0.5 {e['mask_ap_per_threshold']['0.5']:.3f} at step {step}; "
              f"{per_step * step / 60:.1f} min to that point ({per_step:.2f} s/step)")
    assert acceptance_line(6, "end-to-end capacity", ok, detail)


def test_criterion_7_dice_versus_bce(desk_runs):
    miou = {k: run["final"].miou or 0.0 for k, run in desk_runs.items()}
    dice = float(np.mean([miou["dice", s] for s in DESK_SEEDS]))
    bce = float(np.mean([miou["bce", s] for s in DESK_SEEDS]))
    ok = dice >= bce - 0.02
    per_seed = ", ".join(f"seed {s}: {miou['dice', s]:.3f}/{miou['bce', s]:.3f}" for s in DESK_SEEDS)
    detail = (f"mean final mIoU dice {dice:.3f} vs bce {bce:.3f} after {DESK_BUDGET} steps "
              f"(strict win: {dice > bce}); dice/bce {per_seed}")
    assert acceptance_line(7, "dice versus bce", ok, detail)


def test_criterion_8_determinism(desk_runs, desk_records):
    first = [r for r in desk_runs["dice", 0]["history"] if "loss" in r and r["step"] < PREFIX_STEPS]
    again = Trainer(desk_model("dice"), desk_train(0, PREFIX_STEPS), desk_records)
    again.run()
    second = [r for r in again.history if "loss" in r]
    ok = len(first) == len(second) == PREFIX_STEPS and first == second
    mismatch = next((a["step"] for a, b in zip(first, second) if a != b), None)
    detail = f"{len(first)} vs {len(second)} logged steps, first mismatch: {mismatch}"
    assert acceptance_line(8, "determinism", ok, detail)


# -- 9 ---------------------------------------------------------------------------------------

def test_criterion_9_evaluation_protocol():
    records = generate_synthetic(SyntheticCellSpec(seed=9), 8)
    gts = [r.annotations for r in records]
    perfect = evaluate([[Detection(a.bbox, a.class_id, 1.0, a.mask) for a in g] for g in gts], gts)
    exact = perfect.box_ap == perfect.mask_ap == perfect.miou == 1.0

    r = np.random.default_rng(9)
    invariant = 0
    for _ in range(CASES):
        dets = []
        for g in gts:
            img = []
            for a in g:
                if r.random() < 0.8:
                    box = a.bbox + r.normal(0, 3, 4)
                    img.append((box, rect(np.clip(box, 0, 256), 256)))
            for _ in range(int(r.integers(0, 3))):
                xy = r.uniform(0, 200, 2)
                box = np.concatenate([xy, xy + r.uniform(5, 50, 2)])
                img.append((box, rect(box, 256)))
            dets.append(img)
        scores = [r.random(len(img)) for img in dets]
        scale, shift = r.uniform(0.1, 10), r.uniform(-5, 5)

        def build(f):
            return [[Detection(box, 1, float(f(s)), m) for (box, m), s in zip(img, ss)] for img, ss in zip(dets, scores)]
        base = evaluate(build(lambda s: s), gts)
        scaled = evaluate(build(lambda s: scale * s + shift), gts)
        squashed = evaluate(build(lambda s: 1 / (1 + np.exp(-4 * s))), gts)
        invariant += (base.box_ap == scaled.box_ap == squashed.box_ap
                      and base.mask_ap == scaled.mask_ap == squashed.mask_ap)
    ok = exact and invariant == CASES
    detail = (f"oracle box/mask AP and mIoU = {perfect.box_ap}/{perfect.mask_ap}/{perfect.miou}, "
              f"score rescaling invariant in {invariant}/{CASES} randomized cases")
    assert acceptance_line(9, "evaluation protocol", ok, detail)
