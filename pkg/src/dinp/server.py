"""HTTP inference service.

Endpoints (JSON over HTTP, images as base64 PNG):
  POST /api/v1/inpaint      run one inpainting request
  GET  /api/v1/checkpoints  list available checkpoints
  GET  /api/v1/health       liveness + readiness

Status codes: 400 malformed payload / dimension mismatch / mode
inconsistency (body names the offending field), 404 unknown checkpoint,
422 empty union mask, 429 queue overflow, 503 weights still loading.
Identical requests with identical seeds return byte-identical payloads.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .checkpoint import load_checkpoint, read_manifest
from .diffusion import SamplerConfig
from .engine import InpaintEngine, InpaintRequest
from .errors import DinpError, ValidationError
from .imageio import decode_gray_png, decode_mask_png, encode_gray_png, from_base64, to_base64
from .roi import CODE_BBOX, CODE_EMPTY, CODE_FREEFORM, N_CHANNELS

MODE_CODES = {"empty": CODE_EMPTY, "freeform": CODE_FREEFORM, "bbox": CODE_BBOX}


class StillLoading(DinpError):
    pass


class CheckpointRegistry:
    """Scans a directory for .ckpt files and lazily builds engines. Engine
    construction happens under a lock; a request that arrives while another
    thread is loading the same weights gets a 503 rather than piling up."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._engines: Dict[str, tuple] = {}  # id -> (mtime_ns, engine)
        self._loading: set = set()
        self._lock = threading.Lock()

    def listing(self) -> List[dict]:
        out = []
        for path in sorted(self.directory.glob("*.ckpt")):
            manifest = read_manifest(path)
            out.append(
                {
                    "id": path.stem,
                    "step": manifest["step"],
                    "image_size": manifest["unet_config"]["image_size"],
                    "schedule_T": manifest["schedule"]["T"],
                }
            )
        return out

    def ids(self) -> List[str]:
        return [e["id"] for e in self.listing()]

    def default_id(self) -> Optional[str]:
        entries = self.listing()
        if not entries:
            return None
        return max(entries, key=lambda e: (e["step"], e["id"]))["id"]

    def ready(self) -> bool:
        return bool(self._engines)

    def get_engine(self, checkpoint_id: str) -> InpaintEngine:
        path = self.directory / f"{checkpoint_id}.ckpt"
        with self._lock:
            cached = self._engines.get(checkpoint_id)
            if cached is not None and path.exists() and cached[0] == path.stat().st_mtime_ns:
                return cached[1]
            if checkpoint_id in self._loading:
                raise StillLoading(checkpoint_id)
            if not path.exists():
                raise KeyError(checkpoint_id)
            mtime = path.stat().st_mtime_ns
            self._loading.add(checkpoint_id)
        try:
            engine = InpaintEngine(load_checkpoint(path), ref=checkpoint_id)
        finally:
            with self._lock:
                self._loading.discard(checkpoint_id)
        with self._lock:
            # replaced files swap in atomically; in-flight requests keep the
            # snapshot they started with
            self._engines[checkpoint_id] = (mtime, engine)
        return engine

    def preload_default(self) -> None:
        cid = self.default_id()
        if cid is not None:
            self.get_engine(cid)


class InpaintPayload(BaseModel):
    image: str = Field(description="base64 PNG of the input slice")
    mask_ch0: Optional[str] = None
    mask_ch1: Optional[str] = None
    mask_ch2: Optional[str] = None
    mask_ch3: Optional[str] = None
    mask_ch4: Optional[str] = None
    mode_ch0: Literal["empty", "freeform", "bbox"] = "empty"
    mode_ch1: Literal["empty", "freeform", "bbox"] = "empty"
    mode_ch2: Literal["empty", "freeform", "bbox"] = "empty"
    mode_ch3: Literal["empty", "freeform", "bbox"] = "empty"
    mode_ch4: Literal["empty", "freeform", "bbox"] = "empty"
    weight: float = 0.4
    sampler: Literal["ddpm", "ddim"] = "ddim"
    steps: int = 50
    eta: float = 0.0
    rule: Literal["standard", "paper"] = "standard"
    seed: int = 0
    checkpoint: str = ""


def _bad(field: str, message: str) -> HTTPException:
    return HTTPException(status_code=400, detail={"field": field, "message": message})


def _decode_request(payload: InpaintPayload) -> tuple:
    try:
        image = decode_gray_png(from_base64(payload.image))
    except ValidationError as exc:
        raise _bad("image", str(exc))

    roi = np.zeros((N_CHANNELS, *image.shape), dtype=np.uint8)
    cv = np.full(N_CHANNELS, CODE_EMPTY, dtype=np.int64)
    for ch in range(N_CHANNELS):
        raw = getattr(payload, f"mask_ch{ch}")
        mode = getattr(payload, f"mode_ch{ch}")
        if raw is None:
            if mode != "empty":
                raise _bad(f"mode_ch{ch}", f"mode {mode!r} given without mask_ch{ch}")
            continue
        try:
            mask = decode_mask_png(from_base64(raw))
        except ValidationError as exc:
            raise _bad(f"mask_ch{ch}", str(exc))
        if mask.shape != image.shape:
            raise _bad(
                f"mask_ch{ch}",
                f"mask dimensions {mask.shape} do not match image {image.shape}",
            )
        if mode == "empty":
            raise _bad(f"mode_ch{ch}", f"mask_ch{ch} supplied but mode is 'empty'")
        if not mask.any():
            raise _bad(f"mask_ch{ch}", "supplied mask has no set pixels")
        roi[ch] = mask
        cv[ch] = MODE_CODES[mode]
    return image, roi, cv


def create_app(
    checkpoint_dir, queue_depth: int = 8, workers: int = 1, preload: bool = False
) -> FastAPI:
    app = FastAPI(title="dinp inference service", version=__version__)
    registry = CheckpointRegistry(checkpoint_dir)
    queue_slots = threading.BoundedSemaphore(queue_depth)
    run_slots = threading.BoundedSemaphore(workers)
    app.state.registry = registry

    if preload:
        threading.Thread(target=registry.preload_default, daemon=True).start()

    @app.get("/api/v1/health")
    def health():
        return {"status": "ok", "version": __version__, "ready": registry.ready()}

    @app.get("/api/v1/checkpoints")
    def checkpoints():
        return {"checkpoints": registry.listing()}

    @app.post("/api/v1/inpaint")
    def inpaint(payload: InpaintPayload):
        image, roi, cv = _decode_request(payload)
        if not roi.any():
            raise HTTPException(status_code=422, detail="union of ROI channels is empty")

        checkpoint_id = payload.checkpoint or registry.default_id()
        if checkpoint_id is None:
            raise HTTPException(status_code=404, detail="no checkpoints available")
        try:
            engine = registry.get_engine(checkpoint_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown checkpoint {checkpoint_id!r}")
        except StillLoading:
            raise HTTPException(status_code=503, detail="model weights are still loading")

        request = InpaintRequest(
            image=image,
            roi=roi,
            cv=cv,
            sampler=SamplerConfig(
                kind=payload.sampler, steps=payload.steps, eta=payload.eta,
                weight=payload.weight, rule=payload.rule,
            ),
            seed=payload.seed,
            checkpoint_ref=checkpoint_id,
        )
        if not queue_slots.acquire(blocking=False):
            raise HTTPException(status_code=429, detail="inference queue is full")
        try:
            with run_slots:
                try:
                    result = engine.inpaint(request)
                except ValidationError as exc:
                    raise HTTPException(status_code=400, detail=str(exc))
        finally:
            queue_slots.release()
        return {
            "image": to_base64(encode_gray_png(result.image)),
            "steps": result.steps_executed,
            "duration_ms": round(result.duration_s * 1000.0, 3),
            "parameters": result.parameters,
        }

    return app
