"""Binary checkpoint container.

Layout: magic ``DINPCKPT``, format version (u32 LE), manifest length
(u64 LE), a JSON manifest (names, shapes, offsets, config echo, step,
metrics, rng state), the raw little-endian float32 tensor payloads, and a
trailing CRC-32 (u32 LE) over everything prior. Save -> load -> save
round-trips to identical bytes; the manifest is serialized canonically
(sorted keys, no whitespace) to make that hold.
"""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

from .errors import CheckpointError
from .unet import UNetConfig

MAGIC = b"DINPCKPT"
FORMAT_VERSION = 1
_HEADER = len(MAGIC) + 4 + 8


@dataclass
class Checkpoint:
    """Full training snapshot. Inference must read `ema`; the live weights
    exist only so training can resume."""

    step: int
    unet_config: UNetConfig
    schedule_kind: str
    schedule_T: int
    train_config: dict
    model: Dict[str, torch.Tensor]
    ema: Dict[str, torch.Tensor]
    opt_exp_avg: Dict[str, torch.Tensor]
    opt_exp_avg_sq: Dict[str, torch.Tensor]
    opt_steps: Dict[str, int]
    rng_state: dict
    metrics: dict = field(default_factory=dict)

    def ema_denoiser(self) -> Tuple[UNetConfig, Dict[str, torch.Tensor]]:
        """The only sanctioned way to obtain inference weights."""
        return self.unet_config, self.ema


def _tensor_groups(ckpt: Checkpoint):
    yield "model", ckpt.model
    yield "ema", ckpt.ema
    yield "opt.exp_avg", ckpt.opt_exp_avg
    yield "opt.exp_avg_sq", ckpt.opt_exp_avg_sq


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries: List[dict] = []
    chunks: List[bytes] = []
    offset = 0
    for prefix, group in _tensor_groups(ckpt):
        for name, tensor in group.items():
            arr = tensor.detach().to(torch.float32).contiguous().numpy()
            raw = arr.astype("<f4", copy=False).tobytes()
            entries.append(
                {
                    "name": f"{prefix}.{name}",
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "unet_config": asdict(ckpt.unet_config),
        "schedule": {"kind": ckpt.schedule_kind, "T": ckpt.schedule_T},
        "train_config": ckpt.train_config,
        "opt_steps": ckpt.opt_steps,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += FORMAT_VERSION.to_bytes(4, "little")
    body += len(mbytes).to_bytes(8, "little")
    body += mbytes
    for c in chunks:
        body += c
    body += (zlib.crc32(bytes(body)) & 0xFFFFFFFF).to_bytes(4, "little")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))
    return path


def read_manifest(path) -> dict:
    """Parse only the header and manifest (cheap listing; no CRC check)."""
    data = Path(path).read_bytes()
    return _parse_manifest(data, path)[0]


def _parse_manifest(data: bytes, path) -> Tuple[dict, int]:
    if len(data) < _HEADER + 4:
        raise CheckpointError(f"{path}: truncated container")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = int.from_bytes(data[8:12], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = int.from_bytes(data[12:20], "little")
    if _HEADER + mlen + 4 > len(data):
        raise CheckpointError(f"{path}: truncated container")
    try:
        manifest = json.loads(data[_HEADER : _HEADER + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    return manifest, _HEADER + mlen


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    manifest, payload_start = _parse_manifest(data, path)
    stored = int.from_bytes(data[-4:], "little")
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    payload = data[payload_start:-4]

    groups: Dict[str, Dict[str, torch.Tensor]] = {
        "model": {}, "ema": {}, "opt.exp_avg": {}, "opt.exp_avg_sq": {}
    }
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: payload shorter than manifest claims")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        full = entry["name"]
        for prefix in groups:
            if full.startswith(prefix + "."):
                groups[prefix][full[len(prefix) + 1 :]] = torch.from_numpy(arr)
                break
        else:
            raise CheckpointError(f"{path}: unknown tensor namespace for {full!r}")

    return Checkpoint(
        step=manifest["step"],
        unet_config=UNetConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in manifest["unet_config"].items()
        }),
        schedule_kind=manifest["schedule"]["kind"],
        schedule_T=manifest["schedule"]["T"],
        train_config=manifest["train_config"],
        model=groups["model"],
        ema=groups["ema"],
        opt_exp_avg=groups["opt.exp_avg"],
        opt_exp_avg_sq=groups["opt.exp_avg_sq"],
        opt_steps=manifest["opt_steps"],
        rng_state=manifest["rng_state"],
        metrics=manifest["metrics"],
    )


def encode_rng_state(generator: torch.Generator) -> str:
    return base64.b64encode(bytes(generator.get_state().numpy().tobytes())).decode("ascii")
