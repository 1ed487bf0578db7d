"""ROI preprocessing: five-channel mask tensors, conditioning vectors,
guidance dropout, two-stage normalization, and training-sample assembly.

Channel layout (fixed): 0 normal tissue, 1 necrotic core, 2 edema,
3 enhancement, 4 merged multi-component tumor. Conditioning codes:
0 dropped-out/unconditional, 1 empty channel, 2 free-form ROI, 3 bounding
box ROI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from . import phantom
from .diffusion import NoiseSchedule, forward_diffuse
from .errors import ShapeError, ValidationError

N_CHANNELS = 5
CH_NORMAL, CH_NECROTIC, CH_EDEMA, CH_ENHANCEMENT, CH_MERGED = range(N_CHANNELS)
TUMOR_CHANNELS = (CH_NECROTIC, CH_EDEMA, CH_ENHANCEMENT)
CHANNEL_LABELS = {
    CH_NECROTIC: phantom.LABEL_NECROTIC,
    CH_EDEMA: phantom.LABEL_EDEMA,
    CH_ENHANCEMENT: phantom.LABEL_ENHANCEMENT,
}

CODE_DROPPED = 0
CODE_EMPTY = 1
CODE_FREEFORM = 2
CODE_BBOX = 3


def to_bounding_box(mask: np.ndarray) -> np.ndarray:
    """Filled tight axis-aligned rectangle around the occupied pixels."""
    if not mask.any():
        raise ValidationError("cannot fit a bounding box around an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    out = np.zeros_like(mask, dtype=np.uint8)
    out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1
    return out


def validate_roi(roi: np.ndarray) -> None:
    """RoiTensor invariants: binary values, 5 channels, and mutual exclusion
    between the component channels (1-3) and the merged channel (4)."""
    if roi.ndim != 3 or roi.shape[0] != N_CHANNELS:
        raise ShapeError(f"roi tensor must be (5, H, W), got {roi.shape}")
    vals = np.unique(roi)
    if not set(vals.tolist()) <= {0, 1}:
        raise ValidationError(f"roi tensor must be binary, found values {vals}")
    components = any(roi[c].any() for c in TUMOR_CHANNELS)
    if components and roi[CH_MERGED].any():
        raise ValidationError("component channels and the merged channel are mutually exclusive")


@dataclass
class ScenarioPolicy:
    """Randomization of the preprocessing scenarios during training.

    Probabilities: a sample is `components` with p_components, `merged`
    with p_merged, otherwise normal-roi only; either tumor scenario also
    carries a normal ROI with p_normal_combined. Each nonempty tumor
    channel is independently converted to a bounding box with p_bbox.
    Slices without a lesion always fall back to normal-roi only.
    """

    p_components: float = 0.4
    p_merged: float = 0.4
    p_normal_combined: float = 0.5
    p_bbox: float = 0.5
    dropout_p: float = 0.10
    max_shapes: int = 3
    radius_range: Tuple[float, float] = (0.04, 0.25)
    max_tries: int = 50

    def __post_init__(self) -> None:
        for name in ("p_components", "p_merged", "p_normal_combined", "p_bbox", "dropout_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.p_components + self.p_merged > 1.0:
            raise ValidationError("p_components + p_merged must not exceed 1")
        if not 0.0 < self.radius_range[0] <= self.radius_range[1] <= 0.5:
            raise ValidationError(f"radius_range out of bounds: {self.radius_range}")


def build_roi_tensor(
    label: np.ndarray,
    scenario: Optional[str],
    bbox_flags: Sequence[bool] = (False,) * N_CHANNELS,
    rng: Optional[np.random.Generator] = None,
    normal_roi: bool = False,
    brain_mask: Optional[np.ndarray] = None,
    policy: Optional[ScenarioPolicy] = None,
) -> Tuple[np.ndarray, Tuple[bool, ...]]:
    """Populate the five-channel tensor for one preprocessing draw.

    scenario: "components" fills channels 1-3 from the label, "merged"
    fills channel 4 with the union, None fills tumor channels not at all;
    normal_roi additionally samples random circles/rectangles over
    non-tumor brain tissue into channel 0. Returns the tensor plus the
    effective per-channel bbox flags (True where the channel holds a
    rectangle), which build_conditioning_vector consumes.
    """
    h, w = label.shape
    roi = np.zeros((N_CHANNELS, h, w), dtype=np.uint8)
    flags = list(bbox_flags)
    has_tumor = bool((label != 0).any())

    if scenario == "components":
        if not has_tumor:
            raise ValidationError("components scenario requires a lesion in the label")
        for ch, value in CHANNEL_LABELS.items():
            mask = (label == value).astype(np.uint8)
            if mask.any():
                roi[ch] = to_bounding_box(mask) if flags[ch] else mask
            else:
                flags[ch] = False
    elif scenario == "merged":
        if not has_tumor:
            raise ValidationError("merged scenario requires a lesion in the label")
        union = (label != 0).astype(np.uint8)
        roi[CH_MERGED] = to_bounding_box(union) if flags[CH_MERGED] else union
    elif scenario is not None:
        raise ValidationError(f"unknown scenario {scenario!r}")

    if normal_roi:
        if rng is None:
            raise ValidationError("normal-roi sampling requires an rng")
        pol = policy or ScenarioPolicy()
        shape_mask, is_rect = _sample_normal_shapes(label, brain_mask, rng, pol)
        roi[CH_NORMAL] = shape_mask
        flags[CH_NORMAL] = is_rect and shape_mask.any()

    for ch in range(N_CHANNELS):
        if not roi[ch].any():
            flags[ch] = False
    validate_roi(roi)
    return roi, tuple(flags)


def _sample_normal_shapes(
    label: np.ndarray,
    brain_mask: Optional[np.ndarray],
    rng: np.random.Generator,
    policy: ScenarioPolicy,
) -> Tuple[np.ndarray, bool]:
    """1..max_shapes random circles or rectangles over non-tumor tissue.

    One shape kind per draw (a channel holds either free-form or bbox-form
    content, never both). Shapes are rejection-sampled against the lesion
    and clipped to the allowed area; failed placements just reduce the
    shape count.
    """
    h, w = label.shape
    allowed = label == 0
    if brain_mask is not None:
        allowed &= brain_mask.astype(bool)
    out = np.zeros((h, w), dtype=np.uint8)
    is_rect = bool(rng.random() < 0.5)
    n_shapes = int(rng.integers(1, policy.max_shapes + 1))
    candidates = np.argwhere(allowed)
    if candidates.size == 0:
        return out, is_rect
    yy, xx = np.mgrid[0:h, 0:w]
    placed = 0
    for _ in range(policy.max_tries):
        if placed >= n_shapes:
            break
        cy, cx = candidates[rng.integers(len(candidates))]
        radius = rng.uniform(*policy.radius_range) * min(h, w)
        if is_rect:
            aspect = rng.uniform(0.5, 2.0)
            half_h = max(1.0, radius * math.sqrt(math.pi) / 2.0 * aspect)
            half_w = max(1.0, radius * math.sqrt(math.pi) / 2.0 / aspect)
            shape = (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)
        else:
            shape = np.hypot(yy - cy, xx - cx) <= radius
        if (shape & (label != 0)).any():
            continue
        clipped = shape & allowed
        if clipped.any():
            out[clipped] = 1
            placed += 1
    return out, is_rect


def build_conditioning_vector(
    roi: np.ndarray, bbox_flags: Sequence[bool]
) -> np.ndarray:
    """Per-channel mode codes: 1 empty, 2 free-form, 3 bounding box."""
    validate_roi(roi)
    if len(bbox_flags) != N_CHANNELS:
        raise ShapeError(f"need {N_CHANNELS} mode flags, got {len(bbox_flags)}")
    cv = np.empty(N_CHANNELS, dtype=np.int64)
    for ch in range(N_CHANNELS):
        if not roi[ch].any():
            if bbox_flags[ch]:
                raise ValidationError(f"channel {ch} is empty but flagged as bounding box")
            cv[ch] = CODE_EMPTY
        else:
            cv[ch] = CODE_BBOX if bbox_flags[ch] else CODE_FREEFORM
    return cv


def apply_guidance_dropout(
    cv: np.ndarray, p: float, rng: np.random.Generator
) -> np.ndarray:
    """With probability p, zero the whole vector (the unconditional branch);
    otherwise return it unchanged. Never partial."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"dropout probability must lie in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        return np.zeros_like(cv)
    return cv.copy()


@dataclass(frozen=True)
class NormInfo:
    """Everything needed to invert normalize_and_pad."""

    lo: float
    hi: float
    orig_shape: Tuple[int, int]
    pad_top: int
    pad_left: int


def normalize_and_pad_info(image: np.ndarray) -> Tuple[np.ndarray, NormInfo]:
    """Min-max to [0, 1] (a constant image maps to 0), zero-pad to a centered
    square, then map affinely to [-1, 1]. Returns the inversion record."""
    if image.size == 0:
        raise ValidationError("cannot normalize an empty image")
    lo = float(image.min())
    hi = float(image.max())
    if hi > lo:
        unit = (image.astype(np.float32) - lo) / (hi - lo)
    else:
        unit = np.zeros_like(image, dtype=np.float32)
    h, w = unit.shape
    side = max(h, w)
    pad_top = (side - h) // 2
    pad_left = (side - w) // 2
    padded = np.zeros((side, side), dtype=np.float32)
    padded[pad_top : pad_top + h, pad_left : pad_left + w] = unit
    return padded * 2.0 - 1.0, NormInfo(lo, hi, (h, w), pad_top, pad_left)


def normalize_and_pad(image: np.ndarray) -> np.ndarray:
    return normalize_and_pad_info(image)[0]


def pad_like(raster: np.ndarray, info: NormInfo, fill=0) -> np.ndarray:
    """Pad a companion raster (label, mask) with the same geometry."""
    h, w = info.orig_shape
    side = max(h, w)
    out = np.full((side, side), fill, dtype=raster.dtype)
    out[info.pad_top : info.pad_top + h, info.pad_left : info.pad_left + w] = raster
    return out


def denormalize(model_image: np.ndarray, info: NormInfo) -> np.ndarray:
    """Invert normalize_and_pad: back to [0, 1] units of the original image,
    cropped to the original shape and clipped to [0, 1]."""
    unit = (model_image + 1.0) / 2.0
    h, w = info.orig_shape
    unit = unit[info.pad_top : info.pad_top + h, info.pad_left : info.pad_left + w]
    if info.hi > info.lo:
        out = unit * (info.hi - info.lo) + info.lo
    else:
        out = np.full_like(unit, info.lo)
    return np.clip(out, 0.0, 1.0)


@dataclass
class TrainingSample:
    """One assembled training example (everything in padded square space)."""

    composite: np.ndarray          # float32 [-1, 1], noise inside the union mask
    roi: np.ndarray                # uint8 (5, H, W)
    cv: np.ndarray                 # int64 (5,)
    t: int
    eps: np.ndarray                # float32, the drawn noise (full frame)
    union: np.ndarray              # bool (H, W)


def make_training_sample(
    image: np.ndarray,
    label: np.ndarray,
    schedule: NoiseSchedule,
    policy: ScenarioPolicy,
    rng: np.random.Generator,
    brain_threshold: float = 0.05,
) -> TrainingSample:
    """Full preprocessing draw for one (slice, label) pair.

    Samples a scenario, builds the ROI tensor and conditioning vector,
    applies whole-vector guidance dropout, draws t and a full-frame noise
    field, and composites the forward-diffused image into the union mask.
    Context pixels are copied from the clean image, never recomputed.
    """
    if image.shape != label.shape:
        raise ShapeError(f"image {image.shape} and label {label.shape} differ")
    has_tumor = bool((label != 0).any())

    u = rng.random()
    if has_tumor and u < policy.p_components:
        scenario = "components"
    elif has_tumor and u < policy.p_components + policy.p_merged:
        scenario = "merged"
    else:
        scenario = None
    normal_roi = scenario is None or (rng.random() < policy.p_normal_combined)
    if scenario is None and not normal_roi:
        raise ValidationError("slice admits no valid scenario")

    flags = [False] * N_CHANNELS
    for ch in (*TUMOR_CHANNELS, CH_MERGED):
        flags[ch] = bool(rng.random() < policy.p_bbox)

    brain_mask = image > brain_threshold
    roi, eff_flags = build_roi_tensor(
        label, scenario, flags, rng, normal_roi=normal_roi,
        brain_mask=brain_mask, policy=policy,
    )
    if not roi.any() and scenario is None:
        # normal-roi placement failed outright (tiny brain); retry once with
        # the smallest shapes before giving up.
        small = ScenarioPolicy(
            p_components=policy.p_components, p_merged=policy.p_merged,
            p_normal_combined=policy.p_normal_combined, p_bbox=policy.p_bbox,
            dropout_p=policy.dropout_p, max_shapes=1,
            radius_range=(policy.radius_range[0], policy.radius_range[0]),
            max_tries=policy.max_tries,
        )
        roi, eff_flags = build_roi_tensor(
            label, None, flags, rng, normal_roi=True,
            brain_mask=brain_mask, policy=small,
        )
    if not roi.any():
        raise ValidationError("slice admits no valid scenario (no ROI could be placed)")

    cv = build_conditioning_vector(roi, eff_flags)
    cv = apply_guidance_dropout(cv, policy.dropout_p, rng)

    clean, info = normalize_and_pad_info(image)
    roi = np.stack([pad_like(roi[c], info) for c in range(N_CHANNELS)])
    union = roi.any(axis=0)

    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(clean.shape).astype(np.float32)
    x_t = forward_diffuse(torch.from_numpy(clean), t, torch.from_numpy(eps), schedule).numpy()
    composite = np.where(union, x_t, clean)
    return TrainingSample(composite, roi, cv, t, eps, union)
