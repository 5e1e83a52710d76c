import numpy as np
import pytest

from cspdet.backbone import BackboneConfig
from cspdet.data import SyntheticCellSpec, generate_synthetic
from cspdet.detector.model import FeatureConfig, HeadConfig, ModelConfig
from cspdet.trainer import TrainConfig

TINY_SPEC = SyntheticCellSpec(image_size=64, cell_count=(1, 2), nucleus_radius=(4.0, 6.0),
                              cytoplasm_radius=(8.0, 12.0), seed=0)


def tiny_model_config(kind="fpn", use_sam=True, use_csp=True, mask_loss="dice", **heads) -> ModelConfig:
    base = dict(mask_loss=mask_loss, box_head_dim=16, mask_head_dim=8, rpn_pre_nms_train=100,
                rpn_post_nms_train=30, rpn_pre_nms_test=100, rpn_post_nms_test=30)
    base.update(heads)
    return ModelConfig(BackboneConfig(width_mult=0.25, depth_mult=0.3, use_sam=use_sam, use_csp=use_csp),
                       FeatureConfig(kind=kind, channels=8), HeadConfig(**base))


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(lr=0.01, batch_size=1, max_steps=4, warmup_steps=2, checkpoint_every=0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_records():
    return generate_synthetic(TINY_SPEC, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
