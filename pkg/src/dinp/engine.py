"""End-to-end inference: guided reverse diffusion over the ROI while the
surrounding context is held fixed, plus presets for the evaluation
scenarios and the weight / seed sweeps.

Context preservation is exact at every intermediate step: after each
reverse update the off-mask pixels are re-copied from the clean normalized
image, and the final output overwrites only ROI pixels of the original
slice. All randomness comes from a private generator keyed by the request
seed alone, so a weight sweep at fixed seed reuses identical noise draws.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    ddim_step,
    ddpm_step,
    guide,
    make_schedule,
    make_step_subsequence,
)
from .errors import NonFiniteError, ShapeError, ValidationError
from .roi import (
    CH_MERGED,
    CH_NORMAL,
    CODE_BBOX,
    CODE_EMPTY,
    CODE_FREEFORM,
    N_CHANNELS,
    TUMOR_CHANNELS,
    build_conditioning_vector,
    build_roi_tensor,
    denormalize,
    normalize_and_pad_info,
    pad_like,
    to_bounding_box,
    validate_roi,
)
from .unet import build_unet


@dataclass
class InpaintRequest:
    image: np.ndarray               # (H, W) float in [0, 1]
    roi: np.ndarray                 # (5, H, W) binary
    cv: np.ndarray                  # (5,) codes in {1, 2, 3}
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    checkpoint_ref: str = ""

    def validate(self, T: int) -> None:
        if self.image.ndim != 2:
            raise ShapeError(f"image must be 2-D, got shape {self.image.shape}")
        if self.roi.shape != (N_CHANNELS, *self.image.shape):
            raise ShapeError(
                f"roi shape {self.roi.shape} does not match image {self.image.shape}"
            )
        validate_roi(self.roi)
        if not self.roi.any():
            raise ValidationError("union of ROI channels is empty; nothing to inpaint")
        if self.cv.shape != (N_CHANNELS,):
            raise ShapeError(f"conditioning vector must have 5 codes, got {self.cv.shape}")
        for ch in range(N_CHANNELS):
            nonempty = bool(self.roi[ch].any())
            code = int(self.cv[ch])
            if nonempty and code not in (CODE_FREEFORM, CODE_BBOX):
                raise ValidationError(f"channel {ch} holds an ROI but its code is {code}")
            if not nonempty and code != CODE_EMPTY:
                raise ValidationError(f"channel {ch} is empty but its code is {code}")
        self.sampler.validate(T)


@dataclass
class InpaintResult:
    image: np.ndarray
    parameters: dict
    steps_executed: int
    duration_s: float


class InpaintEngine:
    """Holds one model (always the checkpoint's EMA weights) and runs
    requests against it. Safe for concurrent use with per-request rngs:
    the module is read-only after construction."""

    def __init__(self, checkpoint: Checkpoint, ref: str = ""):
        config, ema = checkpoint.ema_denoiser()
        self.unet_config = config
        self.module = build_unet(config, ema)
        self.module.eval()
        self.schedule: NoiseSchedule = make_schedule(
            checkpoint.schedule_kind, checkpoint.schedule_T
        )
        self.ref = ref
        self.step = checkpoint.step

    def _timestep_pairs(self, sampler: SamplerConfig) -> Sequence:
        if sampler.kind == "ddpm":
            return [(t, t - 1) for t in range(self.schedule.T, 0, -1)]
        return make_step_subsequence(self.schedule.T, sampler.steps)

    def _predict(self, x: torch.Tensor, roi: torch.Tensor, t: int,
                 cv: torch.Tensor, sampler: SamplerConfig) -> torch.Tensor:
        x6 = torch.cat([x[None], roi])[None]
        tt = torch.tensor([t], dtype=torch.long)
        eps_c = self.module(x6, tt, cv[None])[0, 0]
        if sampler.rule == "standard" and sampler.weight == 0.0:
            return eps_c
        eps_u = self.module(x6, tt, torch.zeros_like(cv)[None])[0, 0]
        return guide(eps_c, eps_u, sampler.weight, sampler.rule)

    def inpaint(self, request: InpaintRequest) -> InpaintResult:
        request.validate(self.schedule.T)
        t_start = time.perf_counter()

        clean_np, info = normalize_and_pad_info(request.image)
        roi_p = np.stack([pad_like(request.roi[c], info) for c in range(N_CHANNELS)])
        union_p = roi_p.any(axis=0)

        clean = torch.from_numpy(clean_np)
        union = torch.from_numpy(union_p)
        roi_t = torch.from_numpy(roi_p.astype(np.float32))
        cv_t = torch.from_numpy(np.asarray(request.cv, dtype=np.int64))

        gen = torch.Generator().manual_seed(request.seed)
        x = torch.where(union, torch.randn(clean.shape, generator=gen), clean)

        pairs = self._timestep_pairs(request.sampler)
        with torch.no_grad():
            for t, t_prev in pairs:
                eps = self._predict(x, roi_t, t, cv_t, request.sampler)
                if request.sampler.kind == "ddpm":
                    x = ddpm_step(x, t, eps, self.schedule, gen, clip_x0=True)
                else:
                    x = ddim_step(
                        x, t, t_prev, eps, request.sampler.eta, self.schedule, gen,
                        clip_x0=True,
                    )
                x = torch.where(union, x, clean)
                if not torch.isfinite(x).all():
                    raise NonFiniteError(f"sampler state at timestep {t}")

        out01 = denormalize(x.numpy(), info)
        union_orig = request.roi.any(axis=0)
        final = np.where(union_orig, out01, request.image).astype(np.float32)
        return InpaintResult(
            image=final,
            parameters={
                "sampler": request.sampler.kind,
                "steps": request.sampler.steps,
                "eta": request.sampler.eta,
                "weight": request.sampler.weight,
                "rule": request.sampler.rule,
                "seed": request.seed,
                "checkpoint": request.checkpoint_ref or self.ref,
                "model_step": self.step,
            },
            steps_executed=len(pairs),
            duration_s=time.perf_counter() - t_start,
        )

    def inpaint_many(self, requests: Sequence[InpaintRequest]) -> List[InpaintResult]:
        """Run independent requests as one batched reverse chain.

        All requests must share the image shape and the sampler settings;
        randomness still comes from one private generator per request, so a
        batched run draws the same noise a sequential run would.
        """
        if not requests:
            raise ValidationError("inpaint_many needs at least one request")
        sampler = requests[0].sampler
        shape = requests[0].image.shape
        for r in requests:
            r.validate(self.schedule.T)
            if r.sampler != sampler:
                raise ValidationError("batched requests must share sampler settings")
            if r.image.shape != shape:
                raise ValidationError("batched requests must share the image shape")
        t_start = time.perf_counter()

        cleans, infos, rois, unions, gens = [], [], [], [], []
        for r in requests:
            clean_np, info = normalize_and_pad_info(r.image)
            roi_p = np.stack([pad_like(r.roi[c], info) for c in range(N_CHANNELS)])
            cleans.append(clean_np)
            infos.append(info)
            rois.append(roi_p.astype(np.float32))
            unions.append(roi_p.any(axis=0))
            gens.append(torch.Generator().manual_seed(r.seed))
        clean = torch.from_numpy(np.stack(cleans))
        union = torch.from_numpy(np.stack(unions))
        roi_t = torch.from_numpy(np.stack(rois))
        cv = torch.from_numpy(np.stack([np.asarray(r.cv, dtype=np.int64) for r in requests]))
        b = len(requests)

        def draw():
            return torch.stack([torch.randn(shape, generator=g) for g in gens])

        x = torch.where(union, draw(), clean)
        pairs = self._timestep_pairs(sampler)
        uncond = torch.zeros_like(cv)
        with torch.no_grad():
            for t, t_prev in pairs:
                x6 = torch.cat([x[:, None], roi_t], dim=1)
                tt = torch.full((b,), t, dtype=torch.long)
                eps = self.module(x6, tt, cv)[:, 0]
                if not (sampler.rule == "standard" and sampler.weight == 0.0):
                    eps_u = self.module(x6, tt, uncond)[:, 0]
                    eps = guide(eps, eps_u, sampler.weight, sampler.rule)
                if sampler.kind == "ddpm":
                    noise = draw() if t > 1 else None
                    x = ddpm_step(x, t, eps, self.schedule, gens[0], clip_x0=True, noise=noise)
                else:
                    noise = draw() if sampler.eta > 0.0 and t_prev > 0 else None
                    x = ddim_step(x, t, t_prev, eps, sampler.eta, self.schedule,
                                  gens[0], clip_x0=True, noise=noise)
                x = torch.where(union, x, clean)
                if not torch.isfinite(x).all():
                    raise NonFiniteError(f"sampler state at timestep {t}")

        duration = time.perf_counter() - t_start
        results = []
        for i, r in enumerate(requests):
            out01 = denormalize(x[i].numpy(), infos[i])
            union_orig = r.roi.any(axis=0)
            final = np.where(union_orig, out01, r.image).astype(np.float32)
            results.append(InpaintResult(
                image=final,
                parameters={
                    "sampler": sampler.kind, "steps": sampler.steps, "eta": sampler.eta,
                    "weight": sampler.weight, "rule": sampler.rule, "seed": r.seed,
                    "checkpoint": r.checkpoint_ref or self.ref, "model_step": self.step,
                },
                steps_executed=len(pairs),
                duration_s=duration / b,
            ))
        return results

    def weight_sweep(
        self, request: InpaintRequest, weights: Sequence[float]
    ) -> List[InpaintResult]:
        """One result per weight; the rng stream is keyed by the seed only,
        so every run consumes identical noise draws."""
        if not weights:
            raise ValidationError("weight sweep needs at least one weight")
        return [
            self.inpaint(replace(request, sampler=replace(request.sampler, weight=w)))
            for w in weights
        ]

    def seed_sweep(
        self, request: InpaintRequest, seeds: Sequence[int]
    ) -> List[InpaintResult]:
        if not seeds:
            raise ValidationError("seed sweep needs at least one seed")
        return [self.inpaint(replace(request, seed=int(s))) for s in seeds]


def scenario_preset(
    kind: str,
    image: np.ndarray,
    label: np.ndarray,
    mode: str = "freeform",
    sampler: Optional[SamplerConfig] = None,
    seed: int = 0,
    brain_threshold: float = 0.05,
) -> InpaintRequest:
    """Requests reproducing the evaluation scenarios.

    components      -- per-component ROIs on channels 1-3 (scenario 1)
    merged_tumor    -- single multi-component ROI on channel 4 (scenario 2)
    normal_tissue   -- channel 0 over the lesion (scenario 3): its exact
                       shape in freeform mode, its bounding box in bbox mode
    simultaneous    -- normal tissue over the existing lesion plus a fresh
                       merged-tumor ROI elsewhere in the brain
    """
    if mode not in ("freeform", "bbox"):
        raise ValidationError(f"mode must be freeform or bbox, got {mode!r}")
    if image.shape != label.shape:
        raise ShapeError(f"image {image.shape} and label {label.shape} differ")
    bbox = mode == "bbox"
    has_tumor = bool((label != 0).any())

    if kind == "components":
        roi, flags = build_roi_tensor(label, "components", _tumor_flags(bbox))
    elif kind == "merged_tumor":
        roi, flags = build_roi_tensor(label, "merged", _tumor_flags(bbox))
    elif kind == "normal_tissue":
        if not has_tumor:
            raise ValidationError("normal_tissue preset needs a lesion to replace")
        tumor = (label != 0).astype(np.uint8)
        roi = np.zeros((N_CHANNELS, *label.shape), dtype=np.uint8)
        roi[CH_NORMAL] = to_bounding_box(tumor) if bbox else tumor
        flags = tuple(ch == CH_NORMAL and bbox for ch in range(N_CHANNELS))
    elif kind == "simultaneous":
        if not has_tumor:
            raise ValidationError("simultaneous preset needs a lesion to remove")
        tumor = (label != 0).astype(np.uint8)
        roi = np.zeros((N_CHANNELS, *label.shape), dtype=np.uint8)
        roi[CH_NORMAL] = to_bounding_box(tumor) if bbox else tumor
        roi[CH_MERGED] = _place_fresh_tumor_roi(image, label, seed, brain_threshold, bbox)
        flags = tuple(
            (ch in (CH_NORMAL, CH_MERGED)) and bbox for ch in range(N_CHANNELS)
        )
    else:
        raise ValidationError(f"unknown scenario preset {kind!r}")

    cv = build_conditioning_vector(roi, flags)
    return InpaintRequest(
        image=image.astype(np.float32), roi=roi, cv=cv,
        sampler=sampler or SamplerConfig(), seed=seed,
    )


def _tumor_flags(bbox: bool):
    return tuple(ch in (*TUMOR_CHANNELS, CH_MERGED) and bbox for ch in range(N_CHANNELS))


def _place_fresh_tumor_roi(
    image: np.ndarray, label: np.ndarray, seed: int, brain_threshold: float, bbox: bool
) -> np.ndarray:
    """An elliptical merged-tumor ROI over healthy brain tissue, disjoint
    from the existing lesion."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    h, w = label.shape
    brain = image > brain_threshold
    allowed = brain & (label == 0)
    candidates = np.argwhere(allowed)
    if candidates.size == 0:
        raise ValidationError("no healthy brain area available for a fresh tumor ROI")
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(50):
        cy, cx = candidates[rng.integers(len(candidates))]
        r = rng.uniform(0.06, 0.14) * min(h, w)
        shape = np.hypot(yy - cy, xx - cx) <= r
        if not (shape & (label != 0)).any() and (shape & allowed).sum() >= 0.5 * shape.sum():
            mask = (shape & allowed).astype(np.uint8)
            return to_bounding_box(mask) if bbox else mask
    raise ValidationError("could not place a fresh tumor ROI disjoint from the lesion")
