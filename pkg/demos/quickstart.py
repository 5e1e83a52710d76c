"""Synthetic cells in, masks out: generate data, train briefly, evaluate, draw overlays.

Run ``python demos/quickstart.py --steps 300`` for usable masks (about six
minutes on one core); the default is a short smoke run.
"""
import argparse
from pathlib import Path

from cspdet.cli import render_overlay
from cspdet.data import SyntheticCellSpec, generate_synthetic, normalize_image
from cspdet.data.coco import write_image
from cspdet.detector.model import FeatureConfig, HeadConfig, ModelConfig
from cspdet.trainer import TrainConfig, Trainer


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=40)
    parser.add_argument("--output", default="demo_out")
    args = parser.parse_args()

    records = generate_synthetic(SyntheticCellSpec(seed=0), 8)
    print(f"{len(records)} images, {sum(len(r.annotations) for r in records)} cells")

    model_cfg = ModelConfig(feature=FeatureConfig(kind="nasfpn", channels=64),
                            heads=HeadConfig(mask_loss="dice", box_head_dim=256, mask_head_dim=64,
                                             rpn_pre_nms_train=1000, rpn_post_nms_train=500,
                                             rpn_pre_nms_test=500, rpn_post_nms_test=200))
    train_cfg = TrainConfig(lr=0.02, batch_size=1, warmup_steps=min(100, args.steps // 2),
                            max_steps=args.steps, checkpoint_every=0, log_every=10)
    trainer = Trainer(model_cfg, train_cfg, records)
    for record in trainer.run():
        if "loss" in record and record["step"] % 10 == 0:
            print(f"step {record['step']:4d}  loss {record['loss']:+.3f}  mask {record['mask']:+.3f}")

    result = trainer.evaluate()
    print(result.table())

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records[:3]:
        dets = trainer.model.predict(normalize_image(rec.image())[None])[0]
        write_image(out / f"{Path(rec.file_name).stem}_overlay.png", render_overlay(rec.image(), dets))
    print(f"overlays in {out}/")


if __name__ == "__main__":
    main()
