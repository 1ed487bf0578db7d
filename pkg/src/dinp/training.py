"""Training loop: augmentation, batch assembly through the ROI pipeline,
masked-loss optimization at a constant learning rate, EMA shadow weights,
periodic validation on a frozen draw, and checkpointing.

Optimizer is Adam (0.9, 0.999) without weight decay, gradients clipped to
global norm 1.0. Inference always reads the EMA weights; fit() is fully
deterministic given its seed when run single-threaded.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage
import torch

from . import phantom
from .checkpoint import Checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, masked_mse_per_sample
from .errors import ShapeError, TrainingError, ValidationError
from .roi import ScenarioPolicy, TrainingSample, make_training_sample
from .unet import ConditionalUNet, UNetConfig, build_unet, init_params


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference large-scale run used batch 108 at
    the same constant learning rate."""

    lr: float = 1e-4
    batch_size: int = 16
    total_steps: int = 5000
    ema_decay: float = 0.995
    grad_clip: float = 1.0
    dropout_p: float = 0.10
    oversample_factor: int = 2
    augment: bool = True
    max_rotate_deg: float = 15.0
    validate_every: int = 500
    checkpoint_every: int = 2500
    val_samples: int = 512
    log_every: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError(f"EMA decay must lie in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValidationError("dropout_p must lie in [0, 1]")


def apply_geometric(
    image: np.ndarray,
    label: np.ndarray,
    hflip: bool,
    vflip: bool,
    angle: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One geometric transform applied identically to both rasters. The
    image is interpolated bilinearly, the label nearest-neighbor so its
    values stay in {0, 1, 2, 4}."""
    if image.shape != label.shape:
        raise ShapeError(f"image {image.shape} and label {label.shape} differ")
    img, lab = image, label
    if hflip:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if vflip:
        img, lab = img[::-1, :], lab[::-1, :]
    if angle != 0.0:
        img = scipy.ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        img = np.clip(img, 0.0, 1.0)
        lab = scipy.ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=0)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def augment(
    image: np.ndarray,
    label: np.ndarray,
    rng: np.random.Generator,
    max_deg: float = 15.0,
    flips: bool = True,
    rotate: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal/vertical flips plus a rotation uniform in
    [-max_deg, +max_deg]; with everything disabled this is the identity."""
    hflip = flips and rng.random() < 0.5
    vflip = flips and rng.random() < 0.5
    angle = float(rng.uniform(-max_deg, max_deg)) if rotate else 0.0
    return apply_geometric(image, label, hflip, vflip, angle)


def ema_update(
    ema: Dict[str, torch.Tensor], live: Dict[str, torch.Tensor], decay: float
) -> Dict[str, torch.Tensor]:
    """ema' = decay * ema + (1 - decay) * live, per tensor, in place."""
    if ema.keys() != live.keys():
        raise ShapeError("EMA and live parameter names differ")
    with torch.no_grad():
        for name, shadow in ema.items():
            src = live[name]
            if shadow.shape != src.shape:
                raise ShapeError(f"EMA shape mismatch for {name}")
            shadow.mul_(decay).add_(src, alpha=1.0 - decay)
    return ema


class SliceDataset:
    """Split-aware in-memory view of a saved slice directory. Pixel data is
    held as uint8 and converted per batch."""

    def __init__(self, root, records: Sequence[phantom.StudyRecord],
                 assignment: phantom.SplitAssignment):
        self.root = Path(root)
        by_split = phantom.split_records(records, assignment)
        self.records = {sp: list(rs) for sp, rs in by_split.items()}
        self._images: Dict[str, np.ndarray] = {}
        self._labels: Dict[str, np.ndarray] = {}
        for r in records:
            if r.image_path not in self._images:
                self._images[r.image_path] = np.rint(
                    phantom.read_image(self.root, r) * 255.0
                ).astype(np.uint8)
            if r.label_path not in self._labels:
                self._labels[r.label_path] = phantom.read_label(self.root, r)

    @classmethod
    def from_directory(cls, root) -> "SliceDataset":
        records = phantom.load_dataset(root)
        if not records:
            raise ValidationError(f"no dataset found under {root}")
        return cls(root, records, phantom.load_split(root))

    def size(self, split: str) -> int:
        return len(self.records[split])

    def get(self, split: str, index: int) -> Tuple[np.ndarray, np.ndarray]:
        r = self.records[split][index]
        img = self._images[r.image_path].astype(np.float32) / 255.0
        return img, self._labels[r.label_path]


def collate(samples: Sequence[TrainingSample]) -> dict:
    x6 = np.stack(
        [np.concatenate([s.composite[None], s.roi.astype(np.float32)]) for s in samples]
    )
    return {
        "x6": torch.from_numpy(x6),
        "t": torch.tensor([s.t for s in samples], dtype=torch.long),
        "cv": torch.from_numpy(np.stack([s.cv for s in samples])),
        "eps": torch.from_numpy(np.stack([s.eps for s in samples]))[:, None],
        "union": torch.from_numpy(np.stack([s.union for s in samples]))[:, None],
    }


@dataclass
class TrainState:
    config: TrainConfig
    unet_config: UNetConfig
    schedule: NoiseSchedule
    module: ConditionalUNet
    ema: Dict[str, torch.Tensor]
    optimizer: torch.optim.Optimizer
    step: int = 0


def make_train_state(
    config: TrainConfig, unet_config: UNetConfig, schedule: NoiseSchedule, init_seed: int
) -> TrainState:
    params = init_params(unet_config, init_seed)
    module = build_unet(unet_config, params)
    ema = {k: v.detach().clone() for k, v in module.state_dict().items()}
    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr, betas=(0.9, 0.999))
    return TrainState(config, unet_config, schedule, module, ema, optimizer)


def train_step(state: TrainState, samples: Sequence[TrainingSample]) -> float:
    """One optimization step on a batch of assembled samples; returns the
    batch loss (mean over samples of the per-sample masked MSE)."""
    if not samples:
        raise ValidationError("train_step needs a nonempty batch")
    batch = collate(samples)
    state.module.train()
    eps_hat = state.module(batch["x6"], batch["t"], batch["cv"])
    per_sample = masked_mse_per_sample(eps_hat, batch["eps"], batch["union"])
    bad = (~torch.isfinite(per_sample)).nonzero()
    if bad.numel():
        raise TrainingError(
            f"non-finite loss at step {state.step} (batch sample {int(bad[0])}, "
            f"t={samples[int(bad[0])].t})"
        )
    loss = per_sample.mean()
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if state.config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.module.parameters(), state.config.grad_clip)
    state.optimizer.step()
    ema_update(state.ema, dict(state.module.state_dict()), state.config.ema_decay)
    state.step += 1
    return float(loss.detach())


@dataclass
class FitResult:
    checkpoint_paths: List[Path]
    history: List[dict]
    final_val_mse: Optional[float]


def _sample_rng(base_entropy: int, counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_entropy, counter]))


def _assemble(
    dataset: SliceDataset,
    split: str,
    index: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    policy: ScenarioPolicy,
) -> TrainingSample:
    image, label = dataset.get(split, index)
    if cfg.augment:
        image, label = augment(image, label, rng, max_deg=cfg.max_rotate_deg)
    return make_training_sample(image, label, schedule, policy, rng)


def validation_mse(
    unet_config: UNetConfig,
    params: Dict[str, torch.Tensor],
    samples: Sequence[TrainingSample],
    batch_size: int = 32,
) -> float:
    """Masked MSE of the given weights over a fixed sample draw."""
    module = build_unet(unet_config)
    module.load_state_dict(params)
    module.eval()
    losses: List[torch.Tensor] = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i : i + batch_size])
            eps_hat = module(batch["x6"], batch["t"], batch["cv"])
            losses.append(masked_mse_per_sample(eps_hat, batch["eps"], batch["union"]))
    return float(torch.cat(losses).mean())


def validation_draw(
    config: TrainConfig,
    dataset: SliceDataset,
    schedule: NoiseSchedule,
    policy: Optional[ScenarioPolicy] = None,
) -> List[TrainingSample]:
    """The frozen validation samples for a given training seed. Pure function
    of (config, dataset), so a reloaded checkpoint can be revalidated against
    its recorded metric."""
    policy = policy or ScenarioPolicy(dropout_p=config.dropout_p)
    val_child = np.random.SeedSequence(config.seed).spawn(4)[3]
    val_entropy = int(val_child.generate_state(1)[0])
    count = min(config.val_samples, dataset.size("validation") * 4)
    rngs = [_sample_rng(val_entropy, i) for i in range(count)]
    return [
        _assemble(dataset, "validation", int(r.integers(dataset.size("validation"))), r,
                  config, schedule, policy)
        for r in rngs
    ]


def build_checkpoint(state: TrainState, rng_state: dict, metrics: dict) -> Checkpoint:
    params = dict(state.module.state_dict())
    exp_avg, exp_avg_sq, opt_steps = {}, {}, {}
    opt_state = state.optimizer.state
    for name, p in state.module.named_parameters():
        st = opt_state.get(p, {})
        exp_avg[name] = st.get("exp_avg", torch.zeros_like(p)).detach().clone()
        exp_avg_sq[name] = st.get("exp_avg_sq", torch.zeros_like(p)).detach().clone()
        step_val = st.get("step", 0)
        opt_steps[name] = int(step_val.item() if torch.is_tensor(step_val) else step_val)
    return Checkpoint(
        step=state.step,
        unet_config=state.unet_config,
        schedule_kind=state.schedule.kind,
        schedule_T=state.schedule.T,
        train_config=asdict(state.config),
        model={k: v.detach().clone() for k, v in params.items()},
        ema={k: v.detach().clone() for k, v in state.ema.items()},
        opt_exp_avg=exp_avg,
        opt_exp_avg_sq=exp_avg_sq,
        opt_steps=opt_steps,
        rng_state=rng_state,
        metrics=metrics,
    )


def fit(
    config: TrainConfig,
    unet_config: UNetConfig,
    schedule: NoiseSchedule,
    dataset: SliceDataset,
    out_dir,
    policy: Optional[ScenarioPolicy] = None,
    log=print,
) -> FitResult:
    """Run the full training loop and write checkpoints plus a JSON-lines
    metrics log under out_dir."""
    if dataset.size("train") == 0 or dataset.size("validation") == 0:
        raise ValidationError("training needs nonempty train and validation splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policy = policy or ScenarioPolicy(dropout_p=config.dropout_p)

    ss = np.random.SeedSequence(config.seed)
    init_child, order_child, sample_child, _val_child = ss.spawn(4)
    init_seed = int(init_child.generate_state(1)[0])
    sample_entropy = int(sample_child.generate_state(1)[0])
    order_rng = np.random.default_rng(order_child)

    state = make_train_state(config, unet_config, schedule, init_seed)

    epoch_index = phantom.oversample_tumor_slices(
        dataset.records["train"], config.oversample_factor
    )
    epoch_order: List[int] = []

    val_samples = validation_draw(config, dataset, schedule, policy)

    metrics_path = out_dir / "metrics.jsonl"
    history: List[dict] = []
    last_val: Optional[float] = None
    counter = 0
    running: List[float] = []
    paths: List[Path] = []

    def write_metrics(step: int, train_loss: Optional[float]) -> None:
        rec = {"step": step, "train_loss": train_loss, "val_mse": last_val, "lr": config.lr}
        history.append(rec)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")

    initial_val: Optional[float] = None

    def snapshot(tag: str) -> None:
        ckpt = build_checkpoint(
            state,
            rng_state={"seed": config.seed, "sample_counter": counter,
                       "order": order_rng.bit_generator.state},
            metrics={"history": history[-200:], "val_mse": last_val,
                     "initial_val_mse": initial_val},
        )
        paths.append(save_checkpoint(ckpt, out_dir / f"ckpt_{tag}.ckpt"))

    last_val = validation_mse(state.unet_config, state.ema, val_samples)
    write_metrics(0, None)
    initial_val = last_val
    snapshot(f"{state.step:06d}")
    log(f"step 0: val_mse={last_val:.4f}")

    t_start = time.time()
    while state.step < config.total_steps:
        batch = []
        for _ in range(config.batch_size):
            if not epoch_order:
                epoch_order = [epoch_index[i] for i in order_rng.permutation(len(epoch_index))]
            idx = epoch_order.pop()
            batch.append(
                _assemble(dataset, "train", idx, _sample_rng(sample_entropy, counter),
                          config, schedule, policy)
            )
            counter += 1
        loss = train_step(state, batch)
        running.append(loss)

        if state.step % config.log_every == 0 or state.step == config.total_steps:
            write_metrics(state.step, float(np.mean(running)))
            running = []
        if state.step % config.validate_every == 0 or state.step == config.total_steps:
            last_val = validation_mse(state.unet_config, state.ema, val_samples)
            write_metrics(state.step, None)
            rate = state.step / max(time.time() - t_start, 1e-9)
            log(f"step {state.step}: loss={loss:.4f} val_mse={last_val:.4f} ({rate:.1f} it/s)")
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            snapshot(f"{state.step:06d}")

    if config.total_steps > 0:
        last_val = validation_mse(state.unet_config, state.ema, val_samples)
        log(f"done: initial val_mse={initial_val:.4f} final={last_val:.4f}")
        snapshot("final")
    return FitResult(paths, history, last_val)
