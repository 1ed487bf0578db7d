"""Procedural phantom slices with known component geometry and intensities,
plus dataset I/O, the brain-bbox exclusion rule, grouped stratified
splitting, and tumor-slice oversampling.

A phantom study is a stack of slices whose brain extent follows an
ellipsoid profile (tiny at the ends, full in the middle), each slice
rendered under four pseudo-sequence contrast profiles S1..S4 that mimic
the qualitative inversions of T1 / T1CE / T2 / FLAIR. Lesions are nested
wobbly regions core <= enhancement <= edema with per-class intensities
drawn from a configurable table, so generated corpora come with exact
ground truth for downstream fidelity checks.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ValidationError

SEQUENCES = ("S1", "S2", "S3", "S4")
SPLITS = ("train", "validation", "test")

LABEL_BACKGROUND = 0
LABEL_NECROTIC = 1
LABEL_EDEMA = 2
LABEL_ENHANCEMENT = 4
VALID_LABEL_VALUES = frozenset({0, 1, 2, 4})

MANIFEST_FORMAT = "slices-v1"

# Default per-(sequence, tissue) mean intensities. Chosen to mimic the
# contrast inversions of the four MRI weightings (necrosis dark on S1/S2,
# bright-ish on S3; enhancement brightest on S2; edema brightest on S4) so
# a single model must infer the sequence from context. Phantom values, not
# claims about real MRI.
DEFAULT_MEANS: Dict[str, Dict[str, float]] = {
    "S1": {"background": 0.0, "brain": 0.40, "necrotic": 0.15, "edema": 0.30, "enhancement": 0.45},
    "S2": {"background": 0.0, "brain": 0.40, "necrotic": 0.15, "edema": 0.30, "enhancement": 0.85},
    "S3": {"background": 0.0, "brain": 0.40, "necrotic": 0.55, "edema": 0.70, "enhancement": 0.60},
    "S4": {"background": 0.0, "brain": 0.40, "necrotic": 0.45, "edema": 0.75, "enhancement": 0.55},
}

TISSUES = ("background", "brain", "necrotic", "edema", "enhancement")


def _default_spreads() -> Dict[str, Dict[str, float]]:
    return {seq: {tissue: 0.0 for tissue in TISSUES} for seq in SEQUENCES}


@dataclass
class PhantomSpec:
    """Generator configuration. All intensities live in [0, 1].

    texture_noise trades realism against cue sharpness: the per-slice
    min-max normalization divides by the slice maximum, and that extreme
    statistic's jitter grows with the noise amplitude. Keep it well below
    the gaps between per-sequence context levels or the sequences become
    hard to tell apart from context alone.
    """

    image_size: int = 64
    tumor_probability: float = 0.8
    means: Dict[str, Dict[str, float]] = field(default_factory=lambda: {
        seq: dict(vals) for seq, vals in DEFAULT_MEANS.items()
    })
    spreads: Dict[str, Dict[str, float]] = field(default_factory=_default_spreads)
    texture_noise: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 32 or self.image_size % 2 != 0:
            raise ValidationError(f"image_size must be even and >= 32, got {self.image_size}")
        if not 0.0 <= self.tumor_probability <= 1.0:
            raise ValidationError(f"tumor_probability must lie in [0, 1]")
        if self.texture_noise < 0.0:
            raise ValidationError("texture_noise must be >= 0")
        for seq in SEQUENCES:
            for tissue in TISSUES:
                m = self.means[seq][tissue]
                s = self.spreads[seq][tissue]
                if not 0.0 <= m <= 1.0:
                    raise ValidationError(f"mean for ({seq}, {tissue}) outside [0, 1]: {m}")
                if s < 0.0:
                    raise ValidationError(f"spread for ({seq}, {tissue}) negative: {s}")


@dataclass(frozen=True)
class StudyRecord:
    """One slice-sequence sample of a study, as stored in the manifest."""

    study: str
    slice_index: int
    sequence: str
    image_path: str
    label_path: str
    tumor_area: int


@dataclass
class GeneratedSlice:
    """In-memory slice: four pseudo-sequence images sharing one label."""

    study: str
    slice_index: int
    images: Dict[str, np.ndarray]
    label: np.ndarray


@dataclass
class SplitAssignment:
    """Study-level split mapping; every slice of a study shares its split."""

    assignment: Dict[str, str]
    ratios: Tuple[float, float, float]
    seed: int

    def studies(self, split: str) -> List[str]:
        return sorted(s for s, sp in self.assignment.items() if sp == split)


def _wobbly_region(
    shape: Tuple[int, int],
    center: Tuple[float, float],
    radius: float,
    aspect: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Organic closed region: an anisotropic disc with low-frequency radial
    wobble, rasterized on the pixel grid."""
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy = (yy - center[0]) / aspect
    dx = (xx - center[1]) * aspect
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    boundary = radius * (
        1.0
        + amps[0] * np.cos(2 * theta + phases[0])
        + amps[1] * np.cos(3 * theta + phases[1])
        + amps[2] * np.cos(4 * theta + phases[2])
    )
    return r <= boundary


def _bbox_mask(mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size and cols.size:
        out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
    return out


def generate_phantom(
    spec: PhantomSpec,
    seed,
    brain_scale: float | None = None,
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Render one slice: four float32 images in [0, 1] plus a uint8 label.

    Pure function of (spec, seed, brain_scale); brain_scale in [0, 1]
    shrinks the brain ellipse (0 yields a blank slice). When omitted it is
    drawn from the rng.
    """
    rng = np.random.default_rng(seed)
    size = spec.image_size
    shape = (size, size)
    if brain_scale is None:
        brain_scale = float(rng.uniform(0.7, 1.0))

    label = np.zeros(shape, dtype=np.uint8)
    images = {seq: np.zeros(shape, dtype=np.float32) for seq in SEQUENCES}
    if brain_scale <= 0.05:
        return images, label

    cy = size * (0.5 + rng.uniform(-0.03, 0.03))
    cx = size * (0.5 + rng.uniform(-0.03, 0.03))
    a = size * 0.40 * brain_scale * (1.0 + rng.uniform(-0.06, 0.06))
    b = size * 0.33 * brain_scale * (1.0 + rng.uniform(-0.06, 0.06))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    brain = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0

    edema = np.zeros(shape, dtype=bool)
    enhancement = np.zeros(shape, dtype=bool)
    core = np.zeros(shape, dtype=bool)
    want_tumor = rng.random() < spec.tumor_probability and min(a, b) >= 6.0
    if want_tumor:
        edema, enhancement, core = _sample_lesion(rng, shape, (cy, cx), a, b, brain)

    has_tumor = core.any()
    if has_tumor:
        label[edema] = LABEL_EDEMA
        label[enhancement] = LABEL_ENHANCEMENT
        label[core] = LABEL_NECROTIC
        _assert_nesting(label)

    region_by_tissue = {
        "brain": brain & ~edema,
        "edema": edema & ~enhancement,
        "enhancement": enhancement & ~core,
        "necrotic": core,
    }
    for seq in SEQUENCES:
        img = np.zeros(shape, dtype=np.float64)
        sigma = np.zeros(shape, dtype=np.float64)
        for tissue, region in region_by_tissue.items():
            img[region] = spec.means[seq][tissue]
            sigma[region] = spec.spreads[seq][tissue] + spec.texture_noise
        img += sigma * rng.standard_normal(shape)
        images[seq] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return images, label


def _sample_lesion(
    rng: np.random.Generator,
    shape: Tuple[int, int],
    brain_center: Tuple[float, float],
    a: float,
    b: float,
    brain: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nested edema >= enhancement >= core regions inside the brain ellipse.

    Retries a few times if wobble/intersection produces an empty component;
    falls back to concentric discs, which cannot fail at these radii.
    """
    for attempt in range(8):
        frac = rng.uniform(0.0, 0.5)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        ty = brain_center[0] + frac * a * math.sin(theta)
        tx = brain_center[1] + frac * b * math.cos(theta)
        r_allowed = (0.92 - frac) * min(a, b)
        r_edema = rng.uniform(0.45, 0.95) * r_allowed
        if r_edema < 3.0:
            continue
        edema = _wobbly_region(shape, (ty, tx), r_edema, rng.uniform(0.85, 1.18), rng) & brain
        ey = ty + rng.uniform(-0.12, 0.12) * r_edema
        ex = tx + rng.uniform(-0.12, 0.12) * r_edema
        r_enh = rng.uniform(0.55, 0.72) * r_edema
        enh = _wobbly_region(shape, (ey, ex), r_enh, rng.uniform(0.9, 1.1), rng) & edema
        r_core = rng.uniform(0.35, 0.55) * r_enh
        cy2 = ey + rng.uniform(-0.10, 0.10) * r_enh
        cx2 = ex + rng.uniform(-0.10, 0.10) * r_enh
        core = _wobbly_region(shape, (cy2, cx2), r_core, rng.uniform(0.9, 1.1), rng) & enh
        if core.any() and (enh & ~core).any() and (edema & ~enh).any():
            ring = enh & ~core
            if (core & ~_bbox_mask(ring)).sum() == 0:
                return edema, enh, core
    # concentric fallback
    ty, tx = brain_center
    r_edema = 0.45 * min(a, b)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dist = np.hypot(yy - ty, xx - tx)
    edema = (dist <= r_edema) & brain
    enh = dist <= 0.62 * r_edema
    core = dist <= 0.32 * r_edema
    return edema, enh & edema, core & edema


def _assert_nesting(label: np.ndarray) -> None:
    core = label == LABEL_NECROTIC
    enh = label == LABEL_ENHANCEMENT
    if not core.any() or not enh.any() or not (label == LABEL_EDEMA).any():
        raise AssertionError("lesion missing a component")
    if (core & ~_bbox_mask(enh)).any():
        raise AssertionError("core outside the enhancement bounding region")


def generate_study(
    spec: PhantomSpec, study_seed, slices_per_study: int
) -> List[Tuple[int, Dict[str, np.ndarray], np.ndarray]]:
    """All slices of one study; brain extent follows an ellipsoid profile so
    end slices are tiny or blank (and get excluded by the bbox filter)."""
    if isinstance(study_seed, np.random.SeedSequence):
        ss = study_seed
    else:
        ss = np.random.SeedSequence(study_seed)
    children = ss.spawn(slices_per_study)
    out = []
    for i in range(slices_per_study):
        if slices_per_study == 1:
            x = 0.0
        else:
            x = 2.0 * i / (slices_per_study - 1) - 1.0
        scale = math.sqrt(max(0.0, 1.0 - (1.08 * x) ** 2))
        images, label = generate_phantom(spec, children[i], brain_scale=scale)
        out.append((i, images, label))
    return out


def brain_bbox_area(image: np.ndarray, threshold: float = 0.05) -> int:
    """Area (h*w in pixels squared) of the tight rectangle around pixels
    brighter than `threshold`; 0 when nothing exceeds it."""
    mask = image > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0
    return int((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def _image_name(study: str, slice_index: int, seq: str) -> str:
    return f"{study}_{slice_index:03d}_{seq}.png"


def _label_name(study: str, slice_index: int) -> str:
    return f"{study}_{slice_index:03d}.png"


def save_dataset(directory, slices: Iterable[GeneratedSlice]) -> List[StudyRecord]:
    """Write 8-bit grayscale PNGs plus the manifest; returns the records."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    records: List[StudyRecord] = []
    for sl in slices:
        label_rel = f"labels/{_label_name(sl.study, sl.slice_index)}"
        _write_png(root / label_rel, sl.label)
        area = int((sl.label != 0).sum())
        for seq in SEQUENCES:
            img = sl.images[seq]
            image_rel = f"images/{_image_name(sl.study, sl.slice_index, seq)}"
            _write_png(root / image_rel, np.rint(img * 255.0).clip(0, 255).astype(np.uint8))
            records.append(
                StudyRecord(sl.study, sl.slice_index, seq, image_rel, label_rel, area)
            )
    manifest = {"format": MANIFEST_FORMAT, "records": [asdict(r) for r in records]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return records


def load_dataset(directory, validate_labels: bool = True) -> List[StudyRecord]:
    """Read the manifest back; an empty or absent directory yields []."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return []
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValidationError(
            f"unsupported manifest format {manifest.get('format')!r} in {manifest_path}"
        )
    records = [StudyRecord(**r) for r in manifest["records"]]
    seen_labels = set()
    for r in records:
        for rel in (r.image_path, r.label_path):
            if not (root / rel).exists():
                raise ValidationError(f"manifest names a missing file: {rel}")
        if validate_labels and r.label_path not in seen_labels:
            seen_labels.add(r.label_path)
            read_label(root, r)
    return records


def read_image(root, record: StudyRecord) -> np.ndarray:
    arr = np.asarray(Image.open(Path(root) / record.image_path), dtype=np.float32)
    return arr / 255.0


def read_label(root, record: StudyRecord) -> np.ndarray:
    path = Path(root) / record.label_path
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    bad = set(np.unique(arr).tolist()) - VALID_LABEL_VALUES
    if bad:
        raise ValidationError(f"label file {path} contains invalid values {sorted(bad)}")
    return arr


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def generate_dataset(
    spec: PhantomSpec,
    out_dir,
    n_studies: int = 200,
    slices_per_study: int = 38,
    min_bbox_area: int = 100,
    bbox_threshold: float = 0.05,
) -> List[StudyRecord]:
    """Generate, filter, and save a corpus. Slices whose brain bounding box
    covers fewer than `min_bbox_area` square pixels are excluded."""
    master = np.random.SeedSequence(spec.seed)
    study_seeds = master.spawn(n_studies)
    kept: List[GeneratedSlice] = []
    for si in range(n_studies):
        study = f"study{si:04d}"
        for slice_index, images, label in generate_study(spec, study_seeds[si], slices_per_study):
            if brain_bbox_area(images[SEQUENCES[0]], bbox_threshold) < min_bbox_area:
                continue
            kept.append(GeneratedSlice(study, slice_index, images, label))
    return save_dataset(out_dir, kept)


# ---------------------------------------------------------------------------
# splitting and oversampling
# ---------------------------------------------------------------------------

def study_tumor_areas(records: Sequence[StudyRecord]) -> Dict[str, int]:
    """Total lesion pixels per study, counting each slice once."""
    seen = set()
    areas: Dict[str, int] = {}
    for r in records:
        key = (r.study, r.slice_index)
        areas.setdefault(r.study, 0)
        if key not in seen:
            seen.add(key)
            areas[r.study] += r.tumor_area
    return areas


def split_dataset(
    records: Sequence[StudyRecord],
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    strata: int | None = None,
) -> SplitAssignment:
    """Assign whole studies to train/validation/test.

    Studies are ordered by total tumor area, shuffled inside local windows
    (the stratification), then dealt greedily to whichever split is
    furthest below its target ratio. Exact 8:1:1 counts fall out whenever
    n * ratios is integral, and per-split mean tumor area stays close to
    the global mean because each window spreads across splits.
    """
    if not records:
        raise ValidationError("cannot split an empty record set")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {ratios}")
    areas = study_tumor_areas(records)
    studies = sorted(areas, key=lambda s: (-areas[s], s))
    n = len(studies)
    n_active = sum(1 for r in ratios if r > 0)
    if strata is not None:
        if n < strata * n_active:
            raise ValidationError(
                f"{n} studies cannot fill {strata} strata x {n_active} splits"
            )
        window = max(1, math.ceil(n / strata))
    else:
        window = min(10, n)

    rng = np.random.default_rng(seed)
    ordered: List[str] = []
    for start in range(0, n, window):
        block = studies[start : start + window]
        ordered.extend(np.array(block)[rng.permutation(len(block))].tolist())

    counts = dict.fromkeys(SPLITS, 0)
    assignment: Dict[str, str] = {}
    for k, study in enumerate(ordered):
        deficits = [(k + 1) * ratios[i] - counts[sp] for i, sp in enumerate(SPLITS)]
        pick = SPLITS[int(np.argmax(deficits))]
        assignment[study] = pick
        counts[pick] += 1

    for i, sp in enumerate(SPLITS):
        if ratios[i] > 0 and counts[sp] == 0:
            warnings.warn(f"split {sp!r} is empty ({n} studies for 3 splits)", stacklevel=2)
    return SplitAssignment(assignment, tuple(ratios), seed)


def split_records(
    records: Sequence[StudyRecord], assignment: SplitAssignment
) -> Dict[str, List[StudyRecord]]:
    out: Dict[str, List[StudyRecord]] = {sp: [] for sp in SPLITS}
    for r in records:
        out[assignment.assignment[r.study]].append(r)
    return out


def oversample_tumor_slices(records: Sequence[StudyRecord], factor: int) -> List[int]:
    """Epoch index over `records`: tumor slices appear `factor` times."""
    if not isinstance(factor, int) or factor < 1:
        raise ValidationError(f"oversampling factor must be an integer >= 1, got {factor}")
    index: List[int] = []
    for i, r in enumerate(records):
        index.extend([i] * (factor if r.tumor_area > 0 else 1))
    return index


def save_split(directory, assignment: SplitAssignment) -> Path:
    path = Path(directory) / "split.json"
    payload = {
        "format": "split-v1",
        "seed": assignment.seed,
        "ratios": list(assignment.ratios),
        "assignment": assignment.assignment,
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_split(directory) -> SplitAssignment:
    path = Path(directory) / "split.json"
    if not path.exists():
        raise ValidationError(f"no split.json under {directory}; run the split step first")
    payload = json.loads(path.read_text())
    if payload.get("format") != "split-v1":
        raise ValidationError(f"unsupported split format in {path}")
    return SplitAssignment(payload["assignment"], tuple(payload["ratios"]), payload["seed"])
