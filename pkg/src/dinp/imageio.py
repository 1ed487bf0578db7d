"""PNG and base64 helpers shared by the CLI and the HTTP service.

All image transport uses 8-bit grayscale PNG: intensities are stored as
round(v * 255), masks as 0/255. Encoding is deterministic, so identical
pixels always produce identical bytes (the CLI/API parity contract).
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .errors import ValidationError


def encode_gray_png(arr01: np.ndarray) -> bytes:
    """[0, 1] float raster -> 8-bit grayscale PNG bytes."""
    u8 = np.rint(np.clip(arr01, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_gray_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ValidationError(f"not a decodable PNG image: {exc}") from exc
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0


def encode_mask_png(mask: np.ndarray) -> bytes:
    """{0, 1} raster -> 0/255 PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(data: bytes) -> np.ndarray:
    """0/255 PNG bytes -> {0, 1} uint8 raster; other values are rejected."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ValidationError(f"not a decodable PNG mask: {exc}") from exc
    arr = np.asarray(img.convert("L"), dtype=np.uint8)
    values = set(np.unique(arr).tolist())
    if not values <= {0, 255}:
        raise ValidationError(f"mask PNG must contain only 0/255, found {sorted(values)[:6]}")
    return (arr == 255).astype(np.uint8)


def to_base64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def from_base64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except Exception as exc:
        raise ValidationError(f"invalid base64 payload: {exc}") from exc
