"""Command-line entry point: ``cspdet {train,eval,infer,gradcheck,flops,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from .checkpoint import apply_state, load_checkpoint
from .config import RunConfig, dump_config, from_dict, load_config
from .data.augment import resize_to
from .data.coco import DatasetRecord, load_coco, normalize_image, read_image, write_coco, write_image
from .data.rle import rle_encode
from .data.synthetic import SyntheticCellSpec, generate_synthetic
from .detector.model import InstanceSegmenter
from .detector.postprocess import Detection
from .errors import (ChecksumError, ConfigError, DataError, FingerprintMismatch, InvalidArgument,
                     NumericError)
from .metrics import evaluate

log = logging.getLogger("cspdet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# fixed RGB palette; instance k takes entry k mod len
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40],
], dtype=np.float64)
OVERLAY_ALPHA = 0.5


# -- shared helpers -----------------------------------------------------------------------

def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def synthetic_records(cfg: RunConfig) -> list[DatasetRecord]:
    d = cfg.data
    spec = SyntheticCellSpec(image_size=d.image_size, seed=d.synthetic_seed, overlap_prob=d.synthetic_overlap)
    return generate_synthetic(spec, d.synthetic_n)


def coco_records(json_path, image_root, size: int) -> list[DatasetRecord]:
    records, _ = load_coco(json_path, image_root or None)
    return [resize_to(r, size) for r in records]


def dataset_records(cfg: RunConfig, split: str = "train") -> list[DatasetRecord]:
    """Records for ``split``; validation falls back to the training set."""
    d = cfg.data
    if split == "val" and d.val_json:
        return coco_records(d.val_json, d.val_images, d.image_size)
    if d.train_json:
        return coco_records(d.train_json, d.train_images, d.image_size)
    return synthetic_records(cfg)


def config_from_checkpoint(ckpt) -> RunConfig:
    text = ckpt.meta.get("config")
    if text is None:
        raise ConfigError("checkpoint carries no configuration; pass -c")
    return from_dict(tomli.loads(text))


def load_model(checkpoint, cfg: RunConfig | None = None) -> tuple[InstanceSegmenter, RunConfig]:
    ckpt = load_checkpoint(checkpoint)
    cfg = cfg if cfg is not None else config_from_checkpoint(ckpt)
    model = InstanceSegmenter(cfg.model)
    if ckpt.fingerprint != cfg.model.fingerprint():
        raise FingerprintMismatch("checkpoint architecture does not match the configured model")
    apply_state(model, ckpt)
    return model.eval(), cfg


def oracle_detections(records: list[DatasetRecord]) -> list[list[Detection]]:
    """Ground truth repackaged as score-1 detections."""
    return [[Detection(np.asarray(a.bbox, dtype=np.float64), a.class_id, 1.0, a.mask)
             for a in r.annotations if not a.iscrowd] for r in records]


def pad_to_stride(pixels: np.ndarray, stride: int = 32) -> np.ndarray:
    """Zero-pad (after normalization) at the bottom/right to a multiple of ``stride``."""
    x = normalize_image(pixels)
    _, h, w = x.shape
    ph, pw = -h % stride, -w % stride
    return np.pad(x, ((0, 0), (0, ph), (0, pw))) if ph or pw else x


def detection_json(det: Detection, height: int, width: int) -> dict:
    box = det.box.astype(np.float64).copy()
    box[0::2] = np.clip(box[0::2], 0, width)
    box[1::2] = np.clip(box[1::2], 0, height)
    mask = np.zeros((height, width), bool) if det.mask is None else det.mask[:height, :width]
    return {"box": [float(v) for v in box], "class_id": int(det.class_id), "score": float(det.score),
            "mask": {"size": [height, width], "counts": rle_encode(mask)}}


def render_overlay(pixels: np.ndarray, dets: list[Detection]) -> np.ndarray:
    """Translucent mask fills and one-pixel box outlines, colored by instance index."""
    out = pixels.astype(np.float64)
    h, w = pixels.shape[:2]
    for k, det in enumerate(dets):
        color = PALETTE[k % len(PALETTE)]
        if det.mask is not None:
            m = det.mask[:h, :w]
            out[m] = (1 - OVERLAY_ALPHA) * out[m] + OVERLAY_ALPHA * color
        x1, y1, x2, y2 = np.round(det.box).astype(int)
        x1, x2 = np.clip([x1, x2 - 1], 0, w - 1)
        y1, y2 = np.clip([y1, y2 - 1], 0, h - 1)
        out[y1, x1:x2 + 1] = color
        out[y2, x1:x2 + 1] = color
        out[y1:y2 + 1, x1] = color
        out[y1:y2 + 1, x2] = color
    return np.round(out).astype(np.uint8) if dets else pixels.copy()


# -- subcommands --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .trainer import Trainer
    cfg = _config(args)
    if args.output:
        cfg.output_dir = args.output
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    records = dataset_records(cfg, "train")
    if not records:
        raise DataError("training set is empty")
    eval_records = dataset_records(cfg, "val")
    run_dir = Path(cfg.output_dir)
    trainer = Trainer(cfg.model, cfg.train, records, run_dir, eval_records, resolved_config=dump_config(cfg))
    if args.no_resume:
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
        (run_dir / "latest").unlink(missing_ok=True)
    elif trainer.resume():
        log.info("resumed from step %d", trainer.step)
    trainer.run()
    last = trainer.history[-1] if trainer.history else {}
    print(f"run directory: {run_dir}")
    print(f"steps: {trainer.step}  final loss: {last.get('loss', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args) if args.config or args.set else None
    if args.oracle:
        cfg = cfg or _config(args)
        model = None
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model, cfg = load_model(args.checkpoint, cfg)
    if args.dataset:
        records = coco_records(args.dataset, args.images, cfg.data.image_size)
    else:
        records = dataset_records(cfg, "val")
    if not records:
        raise DataError("evaluation set is empty")
    if model is None:
        dets = oracle_detections(records)
    else:
        dets = [model.predict(normalize_image(r.image())[None])[0] for r in records]
    result = evaluate(dets, [r.annotations for r in records], cfg.heads.num_classes)
    print(result.table())
    if args.json:
        text = result.to_json()
        if args.json == "-":
            print(text)
        else:
            Path(args.json).write_text(text + "\n")
    if not result.defined:
        print("metrics undefined: " + ", ".join(result.flags), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg = load_model(args.checkpoint, _config(args) if args.config or args.set else None)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        pixels = read_image(path)
        h, w = pixels.shape[:2]
        dets = model.predict(pad_to_stride(pixels)[None])[0]
        stem = Path(path).stem
        doc = {"image": str(path), "height": h, "width": w,
               "detections": [detection_json(d, h, w) for d in dets]}
        (out_dir / f"{stem}.json").write_text(json.dumps(doc) + "\n")
        if args.overlay:
            write_image(out_dir / f"{stem}_overlay.png", render_overlay(pixels, dets))
        print(f"{path}: {len(dets)} detection(s)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    outcomes = run_suite(seed=args.seed, n_samples=args.samples)
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name:<28} err={o.error:.2e}  tol={o.tol:g}")
    failed = [o.name for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_flops(args) -> int:
    from .flops import format_costs, model_costs
    cfg = _config(args)
    print(format_costs(model_costs(cfg.model, args.image_size, args.depth)))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise InvalidArgument("--n must be at least 1")
    spec = SyntheticCellSpec(image_size=args.image_size, seed=args.seed, overlap_prob=args.overlap)
    records = generate_synthetic(spec, args.n)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_coco(records, out / "annotations.json", out / "images")
    n_inst = sum(len(r.annotations) for r in records)
    print(f"wrote {len(records)} images, {n_inst} instances to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def _add_config_args(p, required: bool = False) -> None:
    p.add_argument("-c", "--config", required=required, help="TOML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cspdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; resumes from the run directory's latest checkpoint")
    _add_config_args(p)
    p.add_argument("--output", help="run directory (overrides output_dir)")
    p.add_argument("--max-steps", type=int, help="override train.max_steps")
    p.add_argument("--no-resume", action="store_true", help="start from step 0 even if checkpoints exist")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="COCO instances JSON (default: the configured validation data)")
    p.add_argument("--images", help="image root for --dataset")
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself (protocol check)")
    p.add_argument("--json", help="write the full report as JSON to this path ('-' for stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect instances in images")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--output", required=True, help="directory for JSON (and overlay) files")
    p.add_argument("--overlay", action="store_true", help="also write <name>_overlay.png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20, help="coordinates probed per case")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="per-module multiply-accumulate and parameter counts")
    _add_config_args(p)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--depth", type=int, default=2, help="module name depth to aggregate at")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("synth", help="write a synthetic cell dataset (PNG + COCO JSON)")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--overlap", type=float, default=0.3, help="probability a cell touches another")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _limit_threads():
    n = os.environ.get("CSPDET_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (ConfigError, FingerprintMismatch, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ChecksumError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
