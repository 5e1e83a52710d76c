import numpy as np
import pytest

from cspdet.checkpoint import Checkpoint, apply_state, load_checkpoint, model_state, save_checkpoint
from cspdet.detector.model import InstanceSegmenter
from cspdet.errors import ChecksumError, FingerprintMismatch
from cspdet.tensor.nn import manual_seed

from conftest import tiny_model_config


@pytest.fixture
def model():
    manual_seed(0)
    return InstanceSegmenter(tiny_model_config())


def snapshot(model, step=7):
    params, buffers = model_state(model)
    optim = {n: np.full_like(p, 0.25) for n, p in list(params.items())[:3]}
    return Checkpoint(model.cfg.fingerprint(), step, params, buffers, optim, {"mask_loss": "dice"})


def test_round_trip_is_bitwise(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(snapshot(model), path)
    manual_seed(1)
    other = InstanceSegmenter(tiny_model_config())
    ckpt = load_checkpoint(path, other.cfg.fingerprint())
    apply_state(other, ckpt)
    for (n, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    for (n, a), (_, b) in zip(model.named_buffers(), other.named_buffers()):
        assert a.tobytes() == b.tobytes(), n
    assert ckpt.step == 7 and ckpt.meta == {"mask_loss": "dice"}
    assert set(ckpt.optimizer) == set(snapshot(model).optimizer)


def test_save_load_save_is_byte_identical(tmp_path, model):
    blob = snapshot(model).to_bytes()
    assert Checkpoint.from_bytes(blob).to_bytes() == blob


@pytest.mark.parametrize("cut", [1, 33, 1000])
def test_truncated_file_fails_checksum(tmp_path, model, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(snapshot(model), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-cut])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_flipped_byte_fails_checksum(model):
    blob = bytearray(snapshot(model).to_bytes())
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        Checkpoint.from_bytes(bytes(blob))


def test_bad_magic_rejected():
    with pytest.raises(ChecksumError):
        Checkpoint.from_bytes(b"PK\x03\x04" + b"\x00" * 64)


def test_sam_toggle_changes_fingerprint_and_is_rejected(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(snapshot(model), path)
    other = tiny_model_config(use_sam=False)
    assert other.fingerprint() != model.cfg.fingerprint()
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(path, other.fingerprint())


def test_mask_loss_toggle_keeps_fingerprint(model):
    assert tiny_model_config(mask_loss="bce").fingerprint() == model.cfg.fingerprint()


def test_apply_state_rejects_foreign_entries(model):
    manual_seed(0)
    other = InstanceSegmenter(tiny_model_config(kind="nasfpn"))
    with pytest.raises(FingerprintMismatch):
        apply_state(other, snapshot(model))


def test_no_temporary_file_left_behind(tmp_path, model):
    save_checkpoint(snapshot(model), tmp_path / "m.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
