import pytest
import torch

from dinp.checkpoint import Checkpoint, load_checkpoint, read_manifest, save_checkpoint
from dinp.errors import CheckpointError
from dinp.training import TrainConfig, make_train_state, train_step, build_checkpoint
from dinp.diffusion import make_schedule

from test_training import _samples


@pytest.fixture()
def trained_checkpoint(tiny_unet_config, tiny_schedule):
    cfg = TrainConfig(total_steps=3, batch_size=2)
    state = make_train_state(cfg, tiny_unet_config, tiny_schedule, init_seed=5)
    samples = _samples(tiny_schedule, n=2)
    for _ in range(3):
        train_step(state, samples)
    return build_checkpoint(state, rng_state={"seed": 0}, metrics={"val_mse": 0.5})


def test_roundtrip_every_tensor(trained_checkpoint, tmp_path):
    path = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    loaded = load_checkpoint(path)
    for group in ("model", "ema", "opt_exp_avg", "opt_exp_avg_sq"):
        orig = getattr(trained_checkpoint, group)
        back = getattr(loaded, group)
        assert orig.keys() == back.keys()
        for k in orig:
            assert torch.equal(orig[k], back[k]), (group, k)
    assert loaded.step == trained_checkpoint.step
    assert loaded.unet_config == trained_checkpoint.unet_config
    assert loaded.opt_steps == trained_checkpoint.opt_steps
    assert loaded.schedule_T == trained_checkpoint.schedule_T


def test_save_load_save_is_byte_identical(trained_checkpoint, tmp_path):
    p1 = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_is_checksum_error(trained_checkpoint, tmp_path):
    path = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 17])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupt_byte_is_checksum_error(trained_checkpoint, tmp_path):
    path = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_rejected(trained_checkpoint, tmp_path):
    path = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_manifest_readable_without_full_load(trained_checkpoint, tmp_path):
    path = save_checkpoint(trained_checkpoint, tmp_path / "a.ckpt")
    manifest = read_manifest(path)
    assert manifest["step"] == trained_checkpoint.step
    assert manifest["schedule"]["T"] == trained_checkpoint.schedule_T
    assert manifest["unet_config"]["image_size"] == trained_checkpoint.unet_config.image_size


def test_ema_accessor_is_the_inference_surface(trained_checkpoint):
    config, ema = trained_checkpoint.ema_denoiser()
    assert config == trained_checkpoint.unet_config
    assert ema is trained_checkpoint.ema
