"""Command-line surface driving the full lifecycle.

Subcommands: phantoms, split, train, inpaint, sweep, scenario, serve,
verify, report. Exit codes: 1 usage error, 2 validation failure, 3 runtime
failure; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import load_run_config
from .diffusion import SamplerConfig, make_schedule
from .engine import InpaintEngine, InpaintRequest, scenario_preset
from .errors import DinpError, ValidationError
from .imageio import decode_gray_png, decode_mask_png, encode_gray_png
from .phantom import (
    generate_dataset,
    load_dataset,
    save_split,
    split_dataset,
)
from .roi import CODE_BBOX, CODE_EMPTY, CODE_FREEFORM, N_CHANNELS
from .training import SliceDataset, fit


class _UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise _UsageError(message)


def _csv_floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> Parser:
    p = Parser(prog="dinp", description=__doc__)
    p.add_argument("--version", action="version", version=f"dinp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    sp = sub.add_parser("phantoms", help="generate a phantom slice dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--studies", type=int)
    sp.add_argument("--slices", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--tumor-probability", type=float)
    sp.set_defaults(func=cmd_phantoms)

    sp = sub.add_parser("split", help="assign studies to train/validation/test")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ratios")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train the denoiser")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("inpaint", help="inpaint one slice")
    _add_sampler_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    for ch in range(N_CHANNELS):
        sp.add_argument(f"--mask-ch{ch}")
        sp.add_argument(f"--mode-ch{ch}", choices=["empty", "freeform", "bbox"],
                        default="empty")
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("sweep", help="weight or seed sweep (scenarios 4-5)")
    _add_sampler_flags(sp)
    sp.add_argument("--kind", choices=["weight", "seed"], required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out-dir", required=True)
    for ch in range(N_CHANNELS):
        sp.add_argument(f"--mask-ch{ch}")
        sp.add_argument(f"--mode-ch{ch}", choices=["empty", "freeform", "bbox"],
                        default="empty")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("scenario", help="preset-driven inpainting (scenarios 1-3)")
    _add_sampler_flags(sp)
    sp.add_argument("--kind", choices=["1", "2", "3", "simultaneous"], required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--label", required=True)
    sp.add_argument("--mode", choices=["freeform", "bbox"], default="freeform")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_scenario)

    sp = sub.add_parser("serve", help="run the HTTP inference service")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint-dir", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--queue-depth", type=int)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("verify", help="run the invariant suites")
    sp.add_argument("--full", action="store_true",
                    help="acceptance-grade probe and draw counts")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="render metrics CSV + figures")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--sweep-dir", help="directory of sweep PNGs for a contact sheet")
    sp.set_defaults(func=cmd_report)
    return p


def _add_sampler_flags(sp) -> None:
    sp.add_argument("--config")
    sp.add_argument("--weight", type=float)
    sp.add_argument("--sampler", choices=["ddpm", "ddim"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--rule", choices=["standard", "paper"])
    sp.add_argument("--seed", type=int, default=0)


def _override(obj, **updates):
    present = {k: v for k, v in updates.items() if v is not None}
    return replace(obj, **present) if present else obj


def _sampler_from(args, base: SamplerConfig) -> SamplerConfig:
    return _override(base, kind=args.sampler, steps=args.steps, eta=args.eta,
                     weight=args.weight, rule=args.rule)


def cmd_phantoms(args) -> int:
    cfg = load_run_config(args.config)
    spec = _override(cfg.phantom, seed=args.seed, image_size=args.image_size,
                     tumor_probability=args.tumor_probability)
    ds = _override(cfg.dataset, studies=args.studies, slices_per_study=args.slices)
    records = generate_dataset(
        spec, args.out, n_studies=ds.studies, slices_per_study=ds.slices_per_study,
        min_bbox_area=ds.min_bbox_area, bbox_threshold=ds.bbox_threshold,
    )
    slices = len({(r.study, r.slice_index) for r in records})
    print(f"wrote {len(records)} slice-sequence samples ({slices} slices) to {args.out}")
    return 0


def cmd_split(args) -> int:
    cfg = load_run_config(args.config)
    ratios = tuple(_csv_floats(args.ratios)) if args.ratios else cfg.dataset.ratios
    if len(ratios) != 3:
        raise ValidationError(f"ratios must be three comma-separated numbers, got {args.ratios!r}")
    seed = args.seed if args.seed is not None else cfg.dataset.split_seed
    records = load_dataset(args.data)
    if not records:
        raise ValidationError(f"no dataset manifest under {args.data}")
    assignment = split_dataset(records, ratios=ratios, seed=seed)
    path = save_split(args.data, assignment)
    counts = {sp: len(assignment.studies(sp)) for sp in ("train", "validation", "test")}
    print(f"wrote {path} ({counts})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = _override(cfg.train, total_steps=args.steps, batch_size=args.batch_size,
                          seed=args.seed, lr=args.lr)
    schedule = make_schedule(cfg.schedule.kind, cfg.schedule.steps)
    dataset = SliceDataset.from_directory(args.data)
    result = fit(train_cfg, cfg.unet, schedule, dataset, args.out, policy=cfg.policy)
    print(f"final validation masked MSE: {result.final_val_mse:.6f}")
    print(f"checkpoints: {', '.join(str(p) for p in result.checkpoint_paths)}")
    return 0


def _load_masks(args, image_shape):
    roi = np.zeros((N_CHANNELS, *image_shape), dtype=np.uint8)
    cv = np.full(N_CHANNELS, CODE_EMPTY, dtype=np.int64)
    codes = {"freeform": CODE_FREEFORM, "bbox": CODE_BBOX}
    for ch in range(N_CHANNELS):
        path = getattr(args, f"mask_ch{ch}")
        mode = getattr(args, f"mode_ch{ch}")
        if path is None:
            if mode != "empty":
                raise ValidationError(f"--mode-ch{ch} {mode} given without --mask-ch{ch}")
            continue
        if mode == "empty":
            raise ValidationError(f"--mask-ch{ch} supplied but --mode-ch{ch} is 'empty'")
        mask = decode_mask_png(Path(path).read_bytes())
        if mask.shape != image_shape:
            raise ValidationError(
                f"mask channel {ch} has shape {mask.shape}, image is {image_shape}"
            )
        roi[ch] = mask
        cv[ch] = codes[mode]
    if not roi.any():
        raise ValidationError("union of ROI channels is empty; supply at least one mask")
    return roi, cv


def cmd_inpaint(args) -> int:
    cfg = load_run_config(args.config)
    engine = InpaintEngine(load_checkpoint(args.checkpoint), ref=Path(args.checkpoint).stem)
    image = decode_gray_png(Path(args.image).read_bytes())
    roi, cv = _load_masks(args, image.shape)
    request = InpaintRequest(image=image, roi=roi, cv=cv,
                             sampler=_sampler_from(args, cfg.sampler), seed=args.seed)
    result = engine.inpaint(request)
    Path(args.out).write_bytes(encode_gray_png(result.image))
    print(f"wrote {args.out} ({result.steps_executed} steps, "
          f"{result.duration_s:.2f}s)")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    engine = InpaintEngine(load_checkpoint(args.checkpoint), ref=Path(args.checkpoint).stem)
    image = decode_gray_png(Path(args.image).read_bytes())
    roi, cv = _load_masks(args, image.shape)
    request = InpaintRequest(image=image, roi=roi, cv=cv,
                             sampler=_sampler_from(args, cfg.sampler), seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "weight":
        values = _csv_floats(args.values)
        results = engine.weight_sweep(request, values)
    else:
        values = _csv_ints(args.values)
        results = engine.seed_sweep(request, values)
    for i, (value, result) in enumerate(zip(values, results)):
        path = out_dir / f"{args.kind}_{i:02d}_{value:g}.png"
        path.write_bytes(encode_gray_png(result.image))
        print(f"wrote {path}")
    return 0


def cmd_scenario(args) -> int:
    cfg = load_run_config(args.config)
    engine = InpaintEngine(load_checkpoint(args.checkpoint), ref=Path(args.checkpoint).stem)
    image = decode_gray_png(Path(args.image).read_bytes())
    label_raw = Path(args.label).read_bytes()
    from PIL import Image
    import io

    label = np.asarray(Image.open(io.BytesIO(label_raw)), dtype=np.uint8)
    kinds = {"1": "components", "2": "merged_tumor", "3": "normal_tissue",
             "simultaneous": "simultaneous"}
    request = scenario_preset(kinds[args.kind], image, label, mode=args.mode,
                              sampler=_sampler_from(args, cfg.sampler), seed=args.seed)
    result = engine.inpaint(request)
    Path(args.out).write_bytes(encode_gray_png(result.image))
    print(f"wrote {args.out} (cv={request.cv.tolist()})")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    cfg = load_run_config(args.config)
    depth = args.queue_depth if args.queue_depth is not None else cfg.service.queue_depth
    app = create_app(args.checkpoint_dir, queue_depth=depth,
                     workers=cfg.service.workers, preload=True)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_verify

    ok = run_verify(quick=not args.full)
    print("verify: ALL PASS" if ok else "verify: FAILURES", file=sys.stderr)
    return 0 if ok else 2


def cmd_report(args) -> int:
    from .report import render_metrics_report, render_sweep_sheet

    written = render_metrics_report(args.metrics, args.out_dir)
    if args.sweep_dir:
        pngs = sorted(Path(args.sweep_dir).glob("*.png"))
        if not pngs:
            raise ValidationError(f"no PNGs under {args.sweep_dir}")
        images = [(p.stem, decode_gray_png(p.read_bytes())) for p in pngs]
        written["sweep_sheet"] = render_sweep_sheet(
            images, Path(args.out_dir) / "sweep_sheet.png"
        )
    for name, path in written.items():
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except DinpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
