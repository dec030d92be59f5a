"""Binary morphology: disk dilation, thinning and the thinness predicate.

Everything outside the image is treated as background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import as_mask

# Clockwise from north: P2..P9 in Zhang-Suen notation, as (dy, dx).
_RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class StructuringElement:
    radius: int
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.offsets)


def disk(radius: int) -> StructuringElement:
    """Integer offsets inside the closed Euclidean disk of ``radius``."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    r2 = radius * radius
    offsets = tuple(
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= r2
    )
    return StructuringElement(radius, offsets)


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    """``out[p] = OR_{o in se} mask[p - o]`` with a false border."""
    m = as_mask(mask)
    h, w = m.shape
    r = max((max(abs(dy), abs(dx)) for dy, dx in se.offsets), default=0)
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:r + h, r:r + w] = m
    out = np.zeros_like(m)
    for dy, dx in se.offsets:
        out |= padded[r - dy:r - dy + h, r - dx:r - dx + w]
    return out


def is_thin(mask: np.ndarray) -> bool:
    """True when no 2x2 window is entirely set."""
    m = as_mask(mask)
    if m.shape[0] < 2 or m.shape[1] < 2:
        return True
    return not (m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]).any()


def _ring_bits(code: int) -> list[int]:
    return [(code >> i) & 1 for i in range(8)]


def _build_luts() -> tuple[np.ndarray, np.ndarray]:
    first = np.zeros(256, dtype=bool)
    second = np.zeros(256, dtype=bool)
    for code in range(256):
        p = _ring_bits(code)
        p2, p3, p4, p5, p6, p7, p8, p9 = p
        b = sum(p)
        a = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
        if not (2 <= b <= 6 and a == 1):
            continue
        first[code] = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
        second[code] = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
    return first, second


_LUT_FIRST, _LUT_SECOND = _build_luts()


def _ring_codes(m: np.ndarray) -> np.ndarray:
    h, w = m.shape
    p = np.zeros((h + 2, w + 2), dtype=np.uint8)
    p[1:-1, 1:-1] = m
    code = np.zeros((h, w), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(_RING):
        code |= p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] << bit
    return code


def _thin_in_place(m: np.ndarray) -> bool:
    """Two-subiteration peeling until nothing changes; returns whether any pixel went."""
    changed_any = False
    while True:
        changed = False
        for lut in (_LUT_FIRST, _LUT_SECOND):
            kill = m & lut[_ring_codes(m)]
            if kill.any():
                m &= ~kill
                changed = True
        if not changed:
            return changed_any
        changed_any = True


def _window_is_simple(win: np.ndarray) -> bool:
    win = win.copy()
    win[1, 1] = False
    _, n_fg = ndimage.label(win, structure=_EIGHT)
    bg = ~win
    bg[1, 1] = False
    labels, _ = ndimage.label(bg)
    touching = {labels[0, 1], labels[1, 0], labels[1, 2], labels[2, 1]} - {0}
    return n_fg == 1 and len(touching) == 1


def _build_simple_lut() -> np.ndarray:
    lut = np.zeros(256, dtype=bool)
    for code in range(256):
        win = np.zeros((3, 3), dtype=bool)
        for bit, (dy, dx) in enumerate(_RING):
            win[1 + dy, 1 + dx] = (code >> bit) & 1
        lut[code] = _window_is_simple(win)
    return lut


_LUT_SIMPLE = _build_simple_lut()


def _is_simple(m: np.ndarray, y: int, x: int) -> bool:
    """Removing (y, x) keeps the local 8-fg / 4-bg topology unchanged."""
    h, w = m.shape
    code = 0
    for bit, (dy, dx) in enumerate(_RING):
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w and m[yy, xx]:
            code |= 1 << bit
    return bool(_LUT_SIMPLE[code])


def _break_blocks(m: np.ndarray) -> bool:
    """Delete one pixel from every remaining all-true 2x2 window.

    Removing pixels never creates a block, so one row-major pass over the
    initial blocks (skipping those an earlier deletion already broke) visits
    them in the same order as repeatedly fixing the first remaining one.
    """
    blocks = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    hits = np.argwhere(blocks)
    h, w = m.shape
    for y, x in hits:
        if not m[y:y + 2, x:x + 2].all():
            continue
        cands = [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)]

        def degree(p):
            py, px = p
            return int(m[max(py - 1, 0):py + 2, max(px - 1, 0):px + 2].sum()) - 1

        cands.sort(key=lambda p: (not _is_simple(m, *p), -degree(p), p))
        m[cands[0]] = False
    return len(hits) > 0


def _restore_lost(m: np.ndarray, labels: np.ndarray, n: int) -> None:
    if n == 0:
        return
    alive = np.zeros(n + 1, dtype=bool)
    alive[np.unique(labels[m])] = True
    slices = ndimage.find_objects(labels)
    for lab in np.flatnonzero(~alive[1:]) + 1:
        sl = slices[lab - 1]
        pts = np.argwhere(labels[sl] == lab)
        centre = pts.mean(axis=0)
        best = pts[np.argmin(((pts - centre) ** 2).sum(axis=1))]
        m[sl[0].start + best[0], sl[1].start + best[1]] = True


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to 1-pixel lines.

    Zhang-Suen style parallel peeling does the bulk of the work. Two repairs
    follow: any input component the peeling erased completely is restored as
    its most central pixel, and any 2x2 solid block left behind loses one
    pixel (a topologically simple one when possible). The loop repeats until
    the result is stable, which makes the operation idempotent.
    """
    m = as_mask(mask).copy()
    if not m.any():
        return m
    labels, n = ndimage.label(m, structure=_EIGHT)
    while True:
        _thin_in_place(m)
        _restore_lost(m, labels, n)
        if not _break_blocks(m):
            return m
