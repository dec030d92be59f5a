"""Pixel containers and region geometry.

Rasters are plain numpy arrays laid out row-major as ``(H, W, C)`` (``C`` is 1
or 3) with dtype ``uint8`` for source images and ``float32`` for anything
derived from them. Binary masks are ``(H, W)`` boolean arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import BoundsError, ConfigError, GeometryError

PaddingPolicy = Literal["reflect", "zero", "none"]


@dataclass(frozen=True)
class Rect:
    y: int
    x: int
    h: int
    w: int

    def __post_init__(self):
        if self.y < 0 or self.x < 0:
            raise GeometryError(f"negative rect origin ({self.y}, {self.x})")

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def right(self) -> int:
        return self.x + self.w


def as_mask(a) -> np.ndarray:
    """Coerce an array to a 2-D boolean mask (any nonzero is true)."""
    a = np.asarray(a)
    if a.ndim == 3:
        a = a.max(axis=2)
    if a.ndim != 2:
        raise GeometryError(f"mask must be 2-D, got shape {a.shape}")
    return a.astype(bool, copy=False)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into ``[0, n)`` without repeating the edge sample."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx > n - 1, period - idx, idx)


def crop(src: np.ndarray, region: Rect, pad: PaddingPolicy = "reflect") -> np.ndarray:
    """Extract ``region`` from ``src``, filling out-of-bounds pixels per ``pad``.

    Works for 2-D masks and 3-D rasters alike; the output has the region's
    extent and the source's trailing dimensions and dtype.
    """
    if region.h <= 0 or region.w <= 0:
        raise GeometryError(f"empty crop region {region}")
    h, w = src.shape[:2]
    inside = region.bottom <= h and region.right <= w
    if inside:
        return src[region.y:region.bottom, region.x:region.right].copy()
    if pad == "none":
        if region.y >= h or region.x >= w:
            raise BoundsError(f"region {region} lies outside a {h}x{w} source")
        raise BoundsError(f"region {region} exceeds a {h}x{w} source and padding is disabled")
    rows = np.arange(region.y, region.bottom)
    cols = np.arange(region.x, region.right)
    if pad == "reflect":
        return src[np.ix_(reflect_index(rows, h), reflect_index(cols, w))].copy()
    if pad == "zero":
        out = np.zeros((region.h, region.w) + src.shape[2:], dtype=src.dtype)
        ih, iw = max(0, min(h, region.bottom) - region.y), max(0, min(w, region.right) - region.x)
        if ih and iw:
            out[:ih, :iw] = src[region.y:region.y + ih, region.x:region.x + iw]
        return out
    raise ConfigError(f"unknown padding policy {pad!r}")


def to_float(src: np.ndarray) -> np.ndarray:
    """Map a ``uint8`` raster onto ``[0, 1]`` as ``float32``."""
    if src.dtype != np.uint8:
        raise ConfigError(f"to_float expects uint8 input, got {src.dtype}")
    return src.astype(np.float32) / np.float32(255.0)


def quantize_u8(src: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_float` up to rounding; clips to the valid range."""
    return np.clip(np.rint(np.asarray(src, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
