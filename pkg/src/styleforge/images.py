"""8-bit RGB PNG reading/writing for float images in [0, 1].

PNG is the on-disk interchange format for both the generated corpus and
the synthesized outputs. Encoding is deterministic: fixed compression,
no timestamps, and optional metadata only via explicit tEXt chunks, so
identical pixels and metadata always produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import ShapeError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0,1] to uint8 with round-half-away."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def save_png(path: Path | str, image: np.ndarray, text: dict[str, str] | None = None) -> None:
    """Write an HxWx3 float image in [0,1] as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"save_png: expected HxWx3 image, got shape {arr.shape}")
    info = PngInfo()
    for key in sorted(text or {}):
        info.add_text(key, (text or {})[key])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG", pnginfo=info)


def load_png(path: Path | str) -> np.ndarray:
    """Read a PNG as an HxWx3 float64 image in [0,1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return from_uint8(np.asarray(rgb))
