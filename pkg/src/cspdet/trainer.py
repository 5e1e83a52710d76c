"""SGD training loop, loss combination and run bookkeeping."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, apply_state, load_checkpoint, model_state, save_checkpoint
from .data.augment import augment
from .data.coco import DatasetRecord, normalize_image, training_target
from .detector.model import InstanceSegmenter, ModelConfig
from .errors import ConfigError, NumericError
from .metrics import EvalResult, evaluate
from .tensor.core import Tensor
from .tensor.nn import manual_seed

log = logging.getLogger(__name__)

LOSS_NAMES = ("rpn_cls", "rpn_box", "box_cls", "box_reg", "mask")


@dataclass
class TrainConfig:
    lr: float | None = None            # None: 0.02 * batch_size / 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1
    warmup_steps: int = 500
    warmup_factor: float = 0.001
    batch_size: int = 2
    max_steps: int = 1000
    seed: int = 0
    loss_weights: dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})
    augment: list[str] = field(default_factory=list)
    log_every: int = 1
    checkpoint_every: int = 500
    eval_every: int = 0                 # 0 disables periodic evaluation

    def __post_init__(self):
        if self.lr is None:
            self.lr = 0.02 * self.batch_size / 16
        if self.lr < 0:
            raise ConfigError("train.lr must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("train.milestones must be strictly increasing")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.max_steps >= 0")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss weights {sorted(unknown)}")
        self.loss_weights = {k: float(self.loss_weights.get(k, 1.0)) for k in LOSS_NAMES}

    def lr_at(self, step: int) -> float:
        """Learning rate for (0-based) ``step``: linear warmup, then step decay."""
        lr = self.lr * self.gamma ** sum(step >= m for m in self.milestones)
        if step < self.warmup_steps:
            alpha = step / self.warmup_steps
            lr *= self.warmup_factor * (1 - alpha) + alpha
        return lr


def sgd_step(params: dict, velocity: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, stats: dict | None = None) -> bool:
    """``v = momentum*v + grad + wd*param; param -= lr*v``.

    Returns False, leaving everything untouched, if any gradient is non-finite.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            if stats is not None:
                stats["aborted_step"] = name
            return False
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
    return True


def total_loss(losses: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    """Weighted sum of loss components; a non-finite component is fatal."""
    bad = [k for k, v in losses.items() if not np.all(np.isfinite(v.data))]
    if bad:
        vals = {k: float(v.data) for k, v in losses.items()}
        raise NumericError(f"non-finite loss component(s) {bad}: {vals}")
    total = None
    for name, value in losses.items():
        term = value * weights.get(name, 1.0)
        total = term if total is None else total + term
    return total


class Trainer:
    """Owns a model, its optimizer state and an optional run directory.

    The loss trajectory depends only on the seed, the configs and the data:
    batch order and per-step sampling are derived from ``(seed, step)``.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, records: list[DatasetRecord],
                 run_dir=None, eval_records: list[DatasetRecord] | None = None, resolved_config: str | None = None):
        if not records:
            raise ConfigError("training needs at least one record")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.records = records
        self.eval_records = eval_records if eval_records is not None else records
        manual_seed(train_cfg.seed)
        self.model = InstanceSegmenter(model_cfg)
        self.fingerprint = model_cfg.fingerprint()
        self.velocity: dict[str, np.ndarray] = {}
        self.step = 0
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._cache: dict[int, tuple[np.ndarray, dict]] = {}
        self.resolved_config = resolved_config
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            if resolved_config is not None:
                (self.run_dir / "resolved_config.toml").write_text(resolved_config)

    # -- data ----------------------------------------------------------------------------
    def _sample(self, index: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
        if not self.cfg.augment:
            if index not in self._cache:
                rec = self.records[index]
                self._cache[index] = (normalize_image(rec.image()), training_target(rec))
            return self._cache[index]
        rec = augment(self.records[index], self.cfg.augment, rng)
        return normalize_image(rec.image()), training_target(rec)

    def batch_indices(self, step: int) -> list[int]:
        """Records for ``step``: epochs are seeded permutations, cycled without end."""
        n, b = len(self.records), self.cfg.batch_size
        out = []
        for k in range(step * b, step * b + b):
            epoch, pos = divmod(k, n)
            perm = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(n)
            out.append(int(perm[pos]))
        return out

    # -- one step ------------------------------------------------------------------------
    def train_step(self) -> dict:
        step = self.step
        rng = np.random.default_rng([self.cfg.seed, 2, step])
        samples = [self._sample(i, rng) for i in self.batch_indices(step)]
        images = np.stack([s[0] for s in samples])
        targets = [s[1] for s in samples]
        self.model.train()
        losses, stats = self.model.forward_train(images, targets, rng)
        loss = total_loss(losses, self.cfg.loss_weights)
        self.model.zero_grad()
        loss.backward()
        lr = self.cfg.lr_at(step)
        applied = sgd_step(dict(self.model.named_parameters()), self.velocity, lr,
                           self.cfg.momentum, self.cfg.weight_decay, stats)
        if not applied:
            log.warning("step %d skipped: non-finite gradient in %s", step, stats.get("aborted_step"))
        record = {"step": step, "lr": lr, "loss": float(loss.data),
                  **{k: float(v.data) for k, v in losses.items()}}
        if not applied:
            record["skipped"] = True
        self.step += 1
        return record

    # -- bookkeeping ---------------------------------------------------------------------
    def evaluate(self, records: list[DatasetRecord] | None = None, batch: int = 1) -> EvalResult:
        records = self.eval_records if records is None else records
        dets = []
        for i in range(0, len(records), batch):
            chunk = records[i:i + batch]
            dets.extend(self.model.predict(np.stack([normalize_image(r.image()) for r in chunk])))
        return evaluate(dets, [r.annotations for r in records], self.model_cfg.heads.num_classes)

    def checkpoint(self) -> Checkpoint:
        params, buffers = model_state(self.model)
        meta = {"mask_loss": self.model_cfg.heads.mask_loss}
        if self.resolved_config is not None:
            meta["config"] = self.resolved_config
        return Checkpoint(self.fingerprint, self.step, params, buffers, dict(self.velocity), meta)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.run_dir / f"ckpt_{self.step:07d}.ckpt"
        save_checkpoint(self.checkpoint(), path)
        if self.run_dir is not None and path.parent == self.run_dir:
            (self.run_dir / "latest").write_text(path.name)
        return path

    def load(self, path) -> None:
        ckpt = load_checkpoint(path, self.fingerprint)
        apply_state(self.model, ckpt)
        self.velocity = {k: v.copy() for k, v in ckpt.optimizer.items()}
        self.step = ckpt.step

    def resume(self) -> bool:
        """Continue from the run directory's latest checkpoint, if any."""
        if self.run_dir is None or not (self.run_dir / "latest").exists():
            return False
        self.load(self.run_dir / (self.run_dir / "latest").read_text().strip())
        log_path = self.run_dir / "metrics.jsonl"
        if log_path.exists():
            # drop entries written after the checkpoint so the log stays a single trajectory
            kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] < self.step]
            log_path.write_text("".join(ln + "\n" for ln in kept))
        return True

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self, max_steps: int | None = None,
            stop: Callable[[int, EvalResult], bool] | None = None) -> list[dict]:
        """Train until ``max_steps`` (default from config) or until ``stop`` says so after an evaluation."""
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        t0 = time.time()
        while self.step < max_steps:
            record = self.train_step()
            if self.cfg.log_every and (record["step"] % self.cfg.log_every == 0 or self.step == max_steps):
                self._log(record)
            halt = False
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                result = self.evaluate()
                self._log({"step": self.step - 1, "eval": json.loads(result.to_json())})
                log.info("step %d eval %s (%.0fs)", self.step, result.rounded(), time.time() - t0)
                halt = stop is not None and stop(self.step, result)
            if self.run_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save()
            if halt:
                break
        if self.run_dir is not None and (not self.cfg.checkpoint_every or self.step % self.cfg.checkpoint_every):
            self.save()
        return self.history


def train(model_cfg: ModelConfig, records: list[DatasetRecord], train_cfg: TrainConfig, run_dir=None,
          eval_records=None, resume: bool = True) -> Trainer:
    trainer = Trainer(model_cfg, train_cfg, records, run_dir, eval_records)
    if resume:
        trainer.resume()
    trainer.run()
    return trainer

