import json

import numpy as np
import pytest

from cspdet.data.coco import normalize_image, training_target
from cspdet.errors import ConfigError, NumericError
from cspdet.tensor.core import Tensor
from cspdet.tensor.nn import Parameter
from cspdet.trainer import LOSS_NAMES, TrainConfig, Trainer, sgd_step, total_loss, train

from conftest import tiny_model_config, tiny_train_config

# every anchor and RoI is sampled, so a step's loss depends only on the parameters
EXHAUSTIVE = dict(rpn_batch=10**6, roi_batch=10**6)


def param(value):
    p = Parameter(np.array([value], dtype=np.float64))
    return p


# -- optimizer ------------------------------------------------------------------------------

def test_plain_sgd_step():
    p = param(1.0)
    p.grad = np.array([1.0])
    assert sgd_step({"w": p}, {}, 0.1, 0.0, 0.0)
    assert p.data[0] == pytest.approx(0.9)


def test_zero_gradient_leaves_parameters():
    p = param(2.5)
    p.grad = np.zeros(1)
    sgd_step({"w": p}, {}, 0.1, 0.9, 0.0)
    assert p.data[0] == 2.5


def test_momentum_and_weight_decay_formula():
    p = param(2.0)
    vel = {"w": np.array([0.5])}
    p.grad = np.array([1.0])
    sgd_step({"w": p}, vel, 0.1, 0.9, 0.01)
    v = 0.9 * 0.5 + 1.0 + 0.01 * 2.0
    assert vel["w"][0] == pytest.approx(v) and p.data[0] == pytest.approx(2.0 - 0.1 * v)


def test_quadratic_bowl_converges():
    p = param(3.0)
    for _ in range(100):
        p.grad = 2 * p.data
        sgd_step({"w": p}, {}, 0.1, 0.0, 0.0)
    assert abs(p.data[0]) < 1e-4


def test_non_finite_gradient_aborts_step():
    p, q = param(1.0), param(1.0)
    p.grad, q.grad = np.array([0.5]), np.array([np.inf])
    stats = {}
    assert not sgd_step({"p": p, "q": q}, {}, 0.1, 0.0, 0.0, stats)
    assert p.data[0] == 1.0 and stats["aborted_step"] == "q"


# -- loss combination -----------------------------------------------------------------------

def test_weighted_sum_arithmetic():
    losses = {"rpn_cls": Tensor(np.float64(0.2)), "box_cls": Tensor(np.float64(0.3)),
              "mask": Tensor(np.float64(-0.5))}
    assert float(total_loss(losses, {}).data) == pytest.approx(0.0)
    assert float(total_loss(losses, {"mask": 2.0}).data) == pytest.approx(-0.5)


def test_nan_component_halts():
    with pytest.raises(NumericError, match="mask"):
        total_loss({"rpn_cls": Tensor(np.float64(0.1)), "mask": Tensor(np.float64(np.nan))}, {})


def test_zero_mask_weight_gives_mask_head_no_gradient(tiny_records):
    cfg = tiny_train_config(loss_weights={"mask": 0.0})
    tr = Trainer(tiny_model_config(), cfg, tiny_records[:1])
    images, targets = normalize_image(tiny_records[0].image())[None], [training_target(tiny_records[0])]
    losses, _ = tr.model.forward_train(images, targets, np.random.default_rng(0))
    total_loss(losses, cfg.loss_weights).backward()
    for name, p in tr.model.mask_head.named_parameters():
        assert p.grad is None or not np.any(p.grad), name


def test_small_step_decreases_loss_on_fixed_batch(tiny_records):
    # small enough that the proposal set does not change between the two evaluations
    tr = Trainer(tiny_model_config(**EXHAUSTIVE), tiny_train_config(lr=1e-5, momentum=0.0, warmup_steps=0),
                 tiny_records[:1])
    images, targets = normalize_image(tiny_records[0].image())[None], [training_target(tiny_records[0])]

    def loss():
        losses, _ = tr.model.forward_train(images, targets, np.random.default_rng(0))
        return total_loss(losses, tr.cfg.loss_weights)

    before = loss()
    tr.model.zero_grad()
    before.backward()
    sgd_step(dict(tr.model.named_parameters()), {}, 1e-5, 0.0, 0.0)
    assert float(loss().data) < float(before.data)


# -- schedule and config --------------------------------------------------------------------

def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.1, warmup_steps=10, warmup_factor=0.0, milestones=[20, 30], gamma=0.1)
    assert cfg.lr_at(0) == 0.0
    assert cfg.lr_at(5) == pytest.approx(0.05)
    assert cfg.lr_at(10) == pytest.approx(0.1)
    assert cfg.lr_at(20) == pytest.approx(0.01)
    assert cfg.lr_at(35) == pytest.approx(0.001)


def test_default_lr_scales_with_batch():
    assert TrainConfig(batch_size=8).lr == pytest.approx(0.01)


@pytest.mark.parametrize("kwargs", [dict(lr=-1.0), dict(milestones=[5, 3]), dict(batch_size=0),
                                    dict(loss_weights={"dice": 1.0})])
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        Trainer(tiny_model_config(), tiny_train_config(), [])


def test_epochs_cycle_through_every_record(tiny_records):
    tr = Trainer(tiny_model_config(), tiny_train_config(batch_size=2), tiny_records)
    seen = [i for step in range(3) for i in tr.batch_indices(step)]
    assert sorted(seen[:3]) == [0, 1, 2] and sorted(seen[3:6]) == [0, 1, 2]


# -- trajectories ---------------------------------------------------------------------------

def losses_of(history):
    return [[r[k] for k in ("loss",) + LOSS_NAMES] for r in history if "loss" in r]


def test_zero_learning_rate_keeps_loss_constant(tiny_records):
    tr = Trainer(tiny_model_config(**EXHAUSTIVE), tiny_train_config(lr=0.0, max_steps=3), tiny_records[:1])
    traj = losses_of(tr.run())
    assert len(traj) == 3 and traj[0] == traj[1] == traj[2]


def test_same_seed_same_trajectory(tiny_records):
    runs = [losses_of(Trainer(tiny_model_config(), tiny_train_config(max_steps=3), tiny_records).run())
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_different_seed_different_trajectory(tiny_records):
    a = losses_of(Trainer(tiny_model_config(), tiny_train_config(max_steps=2), tiny_records).run())
    b = losses_of(Trainer(tiny_model_config(), tiny_train_config(max_steps=2, seed=1), tiny_records).run())
    assert a != b


def test_resume_continues_the_same_trajectory(tmp_path, tiny_records):
    straight = Trainer(tiny_model_config(), tiny_train_config(max_steps=4), tiny_records, tmp_path / "a")
    full = losses_of(straight.run())

    first = Trainer(tiny_model_config(), tiny_train_config(max_steps=4), tiny_records, tmp_path / "b")
    first.run(max_steps=2)
    second = Trainer(tiny_model_config(), tiny_train_config(max_steps=4), tiny_records, tmp_path / "b")
    assert second.resume() and second.step == 2
    second.run()
    log = [json.loads(ln) for ln in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    assert losses_of(log) == full


def test_resume_without_checkpoint_starts_fresh(tmp_path, tiny_records):
    assert not Trainer(tiny_model_config(), tiny_train_config(), tiny_records, tmp_path).resume()


def test_run_directory_contents(tmp_path, tiny_records):
    cfg = tiny_train_config(max_steps=2, checkpoint_every=1)
    tr = Trainer(tiny_model_config(), cfg, tiny_records, tmp_path, resolved_config="x = 1\n")
    tr.run()
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt_0000001.ckpt", "ckpt_0000002.ckpt", "latest", "metrics.jsonl", "resolved_config.toml"]
    assert (tmp_path / "latest").read_text() == "ckpt_0000002.ckpt"


def test_periodic_evaluation_and_early_stop(tiny_records):
    tr = Trainer(tiny_model_config(score_thresh=0.0), tiny_train_config(max_steps=6, eval_every=2), tiny_records[:1])
    calls = []
    history = tr.run(stop=lambda step, res: calls.append(step) or step >= 4)
    assert calls == [2, 4] and tr.step == 4
    evals = [r for r in history if "eval" in r]
    assert len(evals) == 2 and set(evals[0]["eval"]) >= {"box_ap", "mask_ap", "miou"}


def test_nan_loss_aborts_training(tiny_records, monkeypatch):
    tr = Trainer(tiny_model_config(), tiny_train_config(), tiny_records)
    real = tr.model.forward_train

    def poisoned(*args, **kwargs):
        losses, stats = real(*args, **kwargs)
        losses["box_reg"] = losses["box_reg"] * np.float32(np.nan)
        return losses, stats
    monkeypatch.setattr(tr.model, "forward_train", poisoned)
    with pytest.raises(NumericError, match="box_reg"):
        tr.train_step()


def test_non_finite_gradient_step_is_skipped(tiny_records, monkeypatch):
    tr = Trainer(tiny_model_config(), tiny_train_config(), tiny_records)
    before = {n: p.data.copy() for n, p in tr.model.named_parameters()}
    real = tr.model.zero_grad

    def zero_then_poison():
        real()
        first = next(iter(tr.model.parameters()))
        first.grad = np.full(first.shape, np.nan, np.float32)
    monkeypatch.setattr(tr.model, "zero_grad", zero_then_poison)
    record = tr.train_step()
    assert record["skipped"] and tr.step == 1
    for n, p in tr.model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_train_helper_writes_final_checkpoint(tmp_path, tiny_records):
    tr = train(tiny_model_config(), tiny_records, tiny_train_config(max_steps=1), tmp_path)
    assert tr.step == 1 and (tmp_path / "ckpt_0000001.ckpt").exists()
