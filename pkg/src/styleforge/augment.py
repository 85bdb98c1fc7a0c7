"""Affine data augmentation: rotation, zoom, shear, reflection.

Transforms resample with bilinear interpolation about the image center
and fill out-of-source samples with zero. Matrix entries within 1e-12 of
an integer are snapped, so right-angle rotations and identity parameters
reproduce pixels exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import ShapeError, StyleforgeError

REFLECTION_AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class AffineOp:
    """One transform: kind in {rotation, zoom, shear, reflection}.

    ``parameter`` is degrees for rotation, a scale factor for zoom, a
    shear factor, or the axis name for reflection ("horizontal" mirrors
    left-right, "vertical" top-bottom).
    """

    kind: str
    parameter: float | str

    def __post_init__(self):
        if self.kind == "rotation":
            if not -180.0 <= float(self.parameter) <= 180.0:
                raise StyleforgeError(f"rotation must be in [-180, 180], got {self.parameter}")
        elif self.kind == "zoom":
            if float(self.parameter) <= 0.0:
                raise StyleforgeError(f"zoom must be positive, got {self.parameter}")
        elif self.kind == "shear":
            float(self.parameter)
        elif self.kind == "reflection":
            if self.parameter not in REFLECTION_AXES:
                raise StyleforgeError(
                    f"reflection axis must be one of {REFLECTION_AXES}, got {self.parameter!r}"
                )
        else:
            raise StyleforgeError(f"unknown affine kind {self.kind!r}")


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling ranges for random_augment (identity-centered defaults)."""

    rotation_deg: float = 20.0
    zoom: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.1
    reflect_prob: float = 0.5

    def __post_init__(self):
        if self.rotation_deg < 0 or self.shear < 0:
            raise StyleforgeError("rotation/shear ranges must be non-negative half-widths")
        lo, hi = self.zoom
        if not (0 < lo <= hi):
            raise StyleforgeError(f"zoom range must satisfy 0 < lo <= hi, got {self.zoom}")
        if not 0.0 <= self.reflect_prob <= 1.0:
            raise StyleforgeError(f"reflect_prob must be in [0,1], got {self.reflect_prob}")


def _matrix_for(kind: str, value: float) -> np.ndarray:
    if kind == "rotation":
        theta = np.deg2rad(value)
        c, s = np.cos(theta), np.sin(theta)
        m = np.array([[c, -s], [s, c]])
    elif kind == "zoom":
        m = np.array([[value, 0.0], [0.0, value]])
    elif kind == "shear":
        m = np.array([[1.0, value], [0.0, 1.0]])
    else:
        raise StyleforgeError(f"no matrix for kind {kind!r}")
    return _snap(m)


def _snap(m: np.ndarray) -> np.ndarray:
    rounded = np.round(m)
    return np.where(np.abs(m - rounded) < 1e-12, rounded, m)


def _is_identity(m: np.ndarray) -> bool:
    return np.array_equal(m, np.eye(2))


def _warp(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Resample with the inverse map; bilinear, zero fill outside."""
    if _is_identity(forward):
        return image.copy()
    h, w = image.shape[:2]
    flat = image.reshape(h, w, -1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = _snap(np.linalg.inv(forward))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # coordinates centered as (x right, y down)
    src_x = inv[0, 0] * (cols - cx) + inv[0, 1] * (rows - cy) + cx
    src_y = inv[1, 0] * (cols - cx) + inv[1, 1] * (rows - cy) + cy
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0

    out = np.zeros_like(flat)
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            sample = flat[yc, xc] * inside[..., None]
            out += wgt[..., None] * sample
    return out.reshape(image.shape)


def apply_affine(image: np.ndarray, op: AffineOp) -> np.ndarray:
    """Apply one affine transform; output keeps the input dimensions."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("apply_affine: empty image")
    if op.kind == "reflection":
        return arr[:, ::-1].copy() if op.parameter == "horizontal" else arr[::-1].copy()
    return _warp(arr, _matrix_for(op.kind, float(op.parameter)))


def sample_affine_params(ranges: AugmentRanges, rng: np.random.Generator) -> dict:
    """Draw one parameter per kind (fixed draw order for determinism)."""
    return {
        "rotation": float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        "zoom": float(rng.uniform(ranges.zoom[0], ranges.zoom[1])),
        "shear": float(rng.uniform(-ranges.shear, ranges.shear)),
        "reflect": bool(rng.random() < ranges.reflect_prob),
    }


def random_augment(image: np.ndarray, ranges: AugmentRanges, seed: int) -> np.ndarray:
    """Seeded rotation -> zoom -> shear -> optional horizontal reflection.

    The three matrix transforms compose into a single resampling pass;
    degenerate ranges reproduce the input bit-for-bit.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("random_augment: empty image")
    rng = seeding.generator(seed, "augment")
    params = sample_affine_params(ranges, rng)
    m = (
        _matrix_for("shear", params["shear"])
        @ _matrix_for("zoom", params["zoom"])
        @ _matrix_for("rotation", params["rotation"])
    )
    out = _warp(arr, _snap(m))
    if params["reflect"]:
        out = out[:, ::-1].copy()
    return out
