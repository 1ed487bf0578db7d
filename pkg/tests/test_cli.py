import json
import os

import numpy as np
import pytest
import yaml
from fastapi.testclient import TestClient

from dinp import cli
from dinp.config import load_run_config
from dinp.errors import ConfigError
from dinp.imageio import (
    decode_gray_png,
    encode_gray_png,
    encode_mask_png,
    from_base64,
    to_base64,
)
from dinp.phantom import PhantomSpec, generate_phantom, load_dataset, load_split
from dinp.server import create_app


@pytest.fixture(scope="module")
def lifecycle_dir(tmp_path_factory):
    """phantoms -> split -> train, all through the CLI."""
    root = tmp_path_factory.mktemp("lifecycle")
    data = root / "data"
    run = root / "run"
    config = root / "run.yaml"
    config.write_text(yaml.safe_dump({
        "phantom": {"image_size": 32, "tumor_probability": 0.8, "seed": 4},
        "dataset": {"studies": 6, "slices_per_study": 6},
        "schedule": {"kind": "cosine", "steps": 20},
        "unet": {"base_width": 8, "channel_mults": [1, 2], "res_blocks": 1,
                 "attention_levels": [1], "time_width": 16, "code_width": 4,
                 "cond_width": 32, "image_size": 32},
        "train": {"total_steps": 10, "batch_size": 2, "val_samples": 4,
                  "validate_every": 5, "checkpoint_every": 0, "log_every": 5,
                  "seed": 1},
    }))
    assert cli.main(["phantoms", "--config", str(config), "--out", str(data)]) == 0
    assert cli.main(["split", "--data", str(data), "--seed", "0"]) == 0
    assert cli.main(["train", "--config", str(config), "--data", str(data),
                     "--out", str(run)]) == 0
    return {"root": root, "data": data, "run": run, "config": config}


def _tumor_inputs(tmp_path, size=32):
    spec = PhantomSpec(image_size=size, tumor_probability=1.0)
    for s in range(60, 99):
        imgs, label = generate_phantom(spec, s)
        if (label != 0).any():
            image_path = tmp_path / "slice.png"
            mask_path = tmp_path / "mask.png"
            image_path.write_bytes(encode_gray_png(imgs["S3"]))
            mask_path.write_bytes(encode_mask_png((label != 0).astype(np.uint8)))
            from PIL import Image

            label_path = tmp_path / "label.png"
            Image.fromarray(label, mode="L").save(label_path)
            return image_path, mask_path, label_path
    raise AssertionError("no tumor slice")


def test_lifecycle_artifacts(lifecycle_dir):
    records = load_dataset(lifecycle_dir["data"])
    assert records
    assignment = load_split(lifecycle_dir["data"])
    assert set(assignment.assignment.values()) <= {"train", "validation", "test"}
    ckpts = sorted(lifecycle_dir["run"].glob("*.ckpt"))
    assert ckpts
    metrics = lifecycle_dir["run"] / "metrics.jsonl"
    lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert all(rec["lr"] == 1e-4 for rec in lines)


def test_cli_inpaint_and_api_parity(lifecycle_dir, tmp_path):
    image_path, mask_path, _ = _tumor_inputs(tmp_path)
    ckpt = sorted(lifecycle_dir["run"].glob("*.ckpt"))[-1]
    out_path = tmp_path / "out.png"
    rc = cli.main([
        "inpaint", "--checkpoint", str(ckpt), "--image", str(image_path),
        "--mask-ch4", str(mask_path), "--mode-ch4", "freeform",
        "--sampler", "ddim", "--steps", "4", "--eta", "0", "--weight", "0.4",
        "--rule", "standard", "--seed", "5", "--out", str(out_path),
    ])
    assert rc == 0
    cli_bytes = out_path.read_bytes()

    client = TestClient(create_app(ckpt.parent))
    r = client.post("/api/v1/inpaint", json={
        "image": to_base64(image_path.read_bytes()),
        "mask_ch4": to_base64(mask_path.read_bytes()),
        "mode_ch4": "freeform",
        "sampler": "ddim", "steps": 4, "eta": 0.0, "weight": 0.4,
        "rule": "standard", "seed": 5, "checkpoint": ckpt.stem,
    })
    assert r.status_code == 200, r.text
    api_bytes = from_base64(r.json()["image"])
    assert api_bytes == cli_bytes  # byte-identical PNGs

    # context pixels equal the (quantized) input
    out = decode_gray_png(cli_bytes)
    original = decode_gray_png(image_path.read_bytes())
    from dinp.imageio import decode_mask_png

    mask = decode_mask_png(mask_path.read_bytes())
    assert np.array_equal(out[mask == 0], original[mask == 0])


def test_cli_inpaint_without_masks_exits_2(lifecycle_dir, tmp_path, capsys):
    image_path, _, _ = _tumor_inputs(tmp_path)
    ckpt = sorted(lifecycle_dir["run"].glob("*.ckpt"))[-1]
    rc = cli.main(["inpaint", "--checkpoint", str(ckpt), "--image", str(image_path),
                   "--out", str(tmp_path / "x.png")])
    assert rc == 2
    assert "empty" in capsys.readouterr().err


def test_cli_usage_error_exits_1(capsys):
    assert cli.main(["inpaint"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_cli_missing_checkpoint_exits_3(tmp_path, capsys):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(encode_gray_png(np.zeros((32, 32), dtype=np.float32)))
    rc = cli.main(["inpaint", "--checkpoint", str(tmp_path / "missing.ckpt"),
                   "--image", str(image_path), "--mask-ch4", str(image_path),
                   "--mode-ch4", "freeform", "--out", str(tmp_path / "o.png")])
    assert rc == 3


def test_cli_seed_sweep_produces_distinct_pngs(lifecycle_dir, tmp_path):
    image_path, mask_path, _ = _tumor_inputs(tmp_path)
    ckpt = sorted(lifecycle_dir["run"].glob("*.ckpt"))[-1]
    out_dir = tmp_path / "sweep"
    rc = cli.main([
        "sweep", "--kind", "seed", "--values", "1,2,3",
        "--checkpoint", str(ckpt), "--image", str(image_path),
        "--mask-ch4", str(mask_path), "--mode-ch4", "freeform",
        "--sampler", "ddim", "--steps", "3", "--out-dir", str(out_dir),
    ])
    assert rc == 0
    pngs = sorted(out_dir.glob("*.png"))
    assert len(pngs) == 3
    from dinp.imageio import decode_mask_png

    mask = decode_mask_png(mask_path.read_bytes()).astype(bool)
    images = [decode_gray_png(p.read_bytes()) for p in pngs]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(images[i][mask], images[j][mask])


def test_cli_scenario_presets(lifecycle_dir, tmp_path):
    image_path, _, label_path = _tumor_inputs(tmp_path)
    ckpt = sorted(lifecycle_dir["run"].glob("*.ckpt"))[-1]
    out = tmp_path / "scenario.png"
    rc = cli.main([
        "scenario", "--kind", "2", "--mode", "bbox",
        "--checkpoint", str(ckpt), "--image", str(image_path),
        "--label", str(label_path), "--sampler", "ddim", "--steps", "3",
        "--out", str(out),
    ])
    assert rc == 0
    assert out.exists()


def test_cli_report(lifecycle_dir, tmp_path):
    out_dir = tmp_path / "report"
    rc = cli.main(["report", "--metrics", str(lifecycle_dir["run"] / "metrics.jsonl"),
                   "--out-dir", str(out_dir)])
    assert rc == 0
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "loss_curve.png").exists()
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,train_loss,val_mse,lr"


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"train": {"learning_rate": 1e-4}}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_run_config(str(p))
    p.write_text(yaml.safe_dump({"trainer": {}}))
    with pytest.raises(ConfigError, match="trainer"):
        load_run_config(str(p))


def test_config_env_var_and_flag_precedence(tmp_path, monkeypatch):
    env_cfg = tmp_path / "env.yaml"
    env_cfg.write_text(yaml.safe_dump({"train": {"batch_size": 3}}))
    monkeypatch.setenv("DINP_CONFIG", str(env_cfg))
    cfg = load_run_config(None)
    assert cfg.train.batch_size == 3
    flag_cfg = tmp_path / "flag.yaml"
    flag_cfg.write_text(yaml.safe_dump({"train": {"batch_size": 5}}))
    cfg = load_run_config(str(flag_cfg))
    assert cfg.train.batch_size == 5


def test_config_validates_values(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"train": {"lr": -1}}))
    with pytest.raises(ConfigError, match="train"):
        load_run_config(str(p))
