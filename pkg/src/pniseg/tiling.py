"""Tile planning and averaging-based stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError


def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    last = max(0, extent - tile)
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


@dataclass(frozen=True)
class TilePlan:
    tile: int
    stride_y: int
    stride_x: int
    image_h: int
    image_w: int
    origins: tuple[tuple[int, int], ...]

    @property
    def overlapping(self) -> bool:
        return self.stride_y < self.tile or self.stride_x < self.tile

    def __len__(self) -> int:
        return len(self.origins)

    def __iter__(self):
        return iter(self.origins)


def plan_tiles(h: int, w: int, tile: int = 512, stride: int = 256) -> TilePlan:
    """Enumerate square tile origins covering an ``h x w`` image.

    Origins step by ``stride`` along each axis. When the last step would leave
    pixels uncovered, one extra origin is clamped back to ``extent - tile``.
    Images smaller than a tile get a single origin at 0 on that axis; callers
    are expected to pad such images up to the tile size.
    """
    if h <= 0 or w <= 0:
        raise GeometryError(f"cannot tile an empty image ({h}x{w})")
    if tile < 1 or not 1 <= stride <= tile:
        raise ConfigError(f"need tile >= 1 and 1 <= stride <= tile, got tile={tile}, stride={stride}")
    ys = _axis_origins(h, tile, stride)
    xs = _axis_origins(w, tile, stride)
    return TilePlan(tile, stride, stride, h, w, tuple((y, x) for y in ys for x in xs))


class StitchBuffer:
    """Running per-pixel sum and count for averaging tile predictions.

    Sums are accumulated in float64: for the small overlap counts produced by
    :func:`plan_tiles` the accumulation is exact, so averaging identical
    predictions returns them bit-for-bit.
    """

    def __init__(self, h: int, w: int):
        self.sum = np.zeros((h, w), dtype=np.float64)
        self.count = np.zeros((h, w), dtype=np.uint32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.sum.shape

    def commit(self, origin: tuple[int, int], tile_prob: np.ndarray) -> "StitchBuffer":
        tile_prob = np.asarray(tile_prob)
        if tile_prob.ndim == 3:
            tile_prob = tile_prob[..., 0]
        y, x = origin
        th, tw = tile_prob.shape
        h, w = self.shape
        if y < 0 or x < 0 or y + th > h or x + tw > w:
            raise GeometryError(f"tile {th}x{tw} at {origin} exceeds buffer {h}x{w}")
        self.sum[y:y + th, x:x + tw] += tile_prob
        self.count[y:y + th, x:x + tw] += 1
        return self

    def merge(self, other: "StitchBuffer") -> "StitchBuffer":
        if other.shape != self.shape:
            raise GeometryError(f"cannot merge buffers {other.shape} into {self.shape}")
        self.sum += other.sum
        self.count += other.count
        return self

    def finalize(self) -> np.ndarray:
        if (self.count == 0).any():
            n = int((self.count == 0).sum())
            raise GeometryError(f"incomplete tile coverage: {n} pixels never written")
        return (self.sum / self.count).astype(np.float32)


def commit_tile(buf: StitchBuffer, origin: tuple[int, int], tile_prob: np.ndarray) -> StitchBuffer:
    return buf.commit(origin, tile_prob)


def finalize(buf: StitchBuffer) -> np.ndarray:
    return buf.finalize()
