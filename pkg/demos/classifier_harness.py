"""Backbone ablation on a toy classification task.

Each image holds one bright shape (disk, square or horizontal bar) on noise;
the backbone plus a linear head learns to name it.  The four SAM/CSP
combinations train from the same seed on the same data so their held-out
accuracies can be compared side by side.
"""
import argparse

import numpy as np

from cspdet.backbone import BackboneConfig, Classifier
from cspdet.tensor import functional as F
from cspdet.tensor.core import Tensor, no_grad
from cspdet.tensor.nn import manual_seed
from cspdet.trainer import sgd_step

SHAPES = ("disk", "square", "bar")


def make_images(n: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, len(SHAPES), n)
    yy, xx = np.mgrid[:size, :size]
    images = rng.normal(0, 0.3, (n, 3, size, size)).astype(np.float32)
    for img, label in zip(images, labels):
        cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
        r = rng.uniform(size * 0.12, size * 0.2)
        if SHAPES[label] == "disk":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        elif SHAPES[label] == "square":
            mask = (abs(yy - cy) <= r * 0.8) & (abs(xx - cx) <= r * 0.8)
        else:
            mask = (abs(yy - cy) <= r * 0.3) & (abs(xx - cx) <= r * 1.5)
        img[:, mask] += 1.5
    return images, labels


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    model.eval()
    with no_grad():
        logits = model(Tensor(images)).data
    return float((logits.argmax(1) == labels).mean())


def train_one(cfg: BackboneConfig, data, steps: int, batch: int, lr: float, seed: int) -> float:
    (x_train, y_train), (x_test, y_test) = data
    manual_seed(seed)
    model = Classifier(cfg, len(SHAPES))
    rng = np.random.default_rng(seed)
    velocity: dict = {}
    for step in range(steps):
        idx = rng.choice(len(x_train), batch, replace=False)
        model.train()
        loss = F.cross_entropy(model(Tensor(x_train[idx])), y_train[idx])
        model.zero_grad()
        loss.backward()
        warm = min(1.0, (step + 1) / 20)
        sgd_step(dict(model.named_parameters()), velocity, lr * warm, 0.9, 1e-4)
    return accuracy(model, x_test, y_test)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=150)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    data = make_images(600, args.size, rng), make_images(300, args.size, rng)
    print(f"{'SAM':>5} {'CSP':>5} {'test accuracy':>14}")
    for use_sam in (False, True):
        for use_csp in (False, True):
            cfg = BackboneConfig(width_mult=0.5, depth_mult=0.5, use_sam=use_sam, use_csp=use_csp)
            acc = train_one(cfg, data, args.steps, args.batch, args.lr, args.seed)
            print(f"{str(use_sam):>5} {str(use_csp):>5} {acc:>14.3f}")


if __name__ == "__main__":
    main()
