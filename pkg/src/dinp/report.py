"""Report rendering: training-metrics curves and sweep contact sheets as
matplotlib figures, written next to a delimited CSV of the same numbers."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError


def read_metrics(metrics_path) -> List[dict]:
    path = Path(metrics_path)
    if not path.exists():
        raise ValidationError(f"metrics log not found: {path}")
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    if not records:
        raise ValidationError(f"metrics log {path} is empty")
    return records


def write_metrics_csv(records: Sequence[dict], out_path) -> Path:
    out_path = Path(out_path)
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "train_loss", "val_mse", "lr"])
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k) for k in writer.fieldnames})
    return out_path


def render_loss_curve(records: Sequence[dict], out_path) -> Path:
    out_path = Path(out_path)
    train = [(r["step"], r["train_loss"]) for r in records if r.get("train_loss") is not None]
    val = [(r["step"], r["val_mse"]) for r in records if r.get("val_mse") is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    if train:
        ax.plot(*zip(*train), label="train loss", lw=1.0)
    if val:
        ax.plot(*zip(*val), label="validation masked MSE", lw=1.5, marker="o", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("masked MSE")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_sweep_sheet(images: Sequence[Tuple[str, np.ndarray]], out_path) -> Path:
    """Contact sheet of labelled grayscale rasters (sweep outputs)."""
    if not images:
        raise ValidationError("no images to render")
    out_path = Path(out_path)
    n = len(images)
    cols = min(n, 6)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, (label, img) in zip(axes.flat, images):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_metrics_report(metrics_path, out_dir) -> Dict[str, Path]:
    """CSV + loss-curve figure for one training run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_metrics(metrics_path)
    return {
        "csv": write_metrics_csv(records, out_dir / "metrics.csv"),
        "loss_curve": render_loss_curve(records, out_dir / "loss_curve.png"),
    }
