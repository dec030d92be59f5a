"""Training-time augmentation and the invertible test-time transform set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GeometryError
from .raster import as_mask


def _check_range(name: str, r) -> tuple[float, float]:
    lo, hi = (float(v) for v in r)
    if lo > hi:
        raise ConfigError(f"{name}: range ({lo}, {hi}) is not ordered")
    return lo, hi


@dataclass
class AugmentConfig:
    """Sampling ranges for training augmentation, on the [0, 1] pixel scale."""

    enabled: bool = True
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    scale: tuple[float, float] = (0.9, 1.1)
    brightness_delta: tuple[float, float] = (-0.2, 0.2)
    rgb_shift: tuple[float, float] = (-0.1, 0.1)
    smooth_sigma: tuple[float, float] = (0.0, 1.5)
    probability: float = 0.5

    def __post_init__(self):
        for name in ("rotation_deg", "translate_frac", "scale", "brightness_delta", "rgb_shift", "smooth_sigma"):
            setattr(self, name, _check_range(name, getattr(self, name)))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability must lie in [0, 1], got {self.probability}")
        if self.scale[0] <= 0 or self.smooth_sigma[0] < 0:
            raise ConfigError("scale must be positive and smooth_sigma non-negative")


def _affine(h: int, w: int, angle_deg: float, scale: float, ty: float, tx: float):
    """Output->input mapping for a rotation/scale about the centre plus a shift.

    Positive angles turn the content counter-clockwise on screen, matching
    ``np.rot90``.
    """
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    # Inverse of "rotate by a, then scale": input = R(-a) / scale @ (out - centre) + centre - shift.
    mat = np.array([[c, s], [-s, c]]) / scale
    mat = np.round(mat, 12)  # exact grid symmetries for multiples of 90 degrees
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - mat @ centre - mat @ np.array([ty, tx])
    return mat, offset


def augment_pair(image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, rng_seed: int):
    """Randomly augment an image tile and its boundary mask.

    ``image`` is a float32 ``(H, W, 3)`` raster in [0, 1]; ``mask`` an ``(H, W)``
    boolean plane. Geometric transforms are sampled once and applied to both
    (bilinear for the image, nearest-neighbour for the mask); brightness, RGB
    shift and Gaussian smoothing touch only the image. Reflect borders are used
    for the image, false for the mask.
    """
    mask = as_mask(mask)
    if image.shape[:2] != mask.shape:
        raise GeometryError(f"image {image.shape[:2]} and mask {mask.shape} extents differ")
    if not cfg.enabled:
        return image, mask
    rng = np.random.default_rng(rng_seed)
    h, w = mask.shape
    p = cfg.probability

    def maybe(lo_hi, neutral):
        # Always draw both numbers so the stream layout is independent of outcomes.
        hit, value = rng.random(), rng.uniform(*lo_hi)
        return value if hit < p else neutral

    angle = maybe(cfg.rotation_deg, 0.0)
    ty = maybe(cfg.translate_frac, 0.0) * h
    tx = maybe(cfg.translate_frac, 0.0) * w
    scale = maybe(cfg.scale, 1.0)
    brightness = maybe(cfg.brightness_delta, 0.0)
    shift_hit = rng.random() < p
    shift = rng.uniform(*cfg.rgb_shift, size=image.shape[2] if image.ndim == 3 else 1)
    sigma = maybe(cfg.smooth_sigma, 0.0)

    out = np.asarray(image, dtype=np.float32)
    if angle != 0.0 or ty != 0.0 or tx != 0.0 or scale != 1.0:
        mat, offset = _affine(h, w, angle, scale, ty, tx)
        if out.ndim == 3:
            out = np.stack(
                [ndimage.affine_transform(out[..., c], mat, offset, order=1, mode="mirror")
                 for c in range(out.shape[2])],
                axis=-1,
            )
        else:
            out = ndimage.affine_transform(out, mat, offset, order=1, mode="mirror")
        mask = ndimage.affine_transform(mask.astype(np.uint8), mat, offset, order=0,
                                        mode="constant", cval=0).astype(bool)
    else:
        out = out.copy()
    if brightness != 0.0:
        out += np.float32(brightness)
    if shift_hit:
        out += shift.astype(np.float32)
    if sigma > 0.0:
        sig = (sigma, sigma, 0.0) if out.ndim == 3 else sigma
        out = ndimage.gaussian_filter(out, sig, mode="mirror")
    np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32, copy=False), mask


GEOMETRIC_KINDS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")
PHOTOMETRIC_KINDS = ("brightness", "contrast", "rgb_shift", "smooth")


@dataclass(frozen=True)
class TtaTransform:
    """One member of the test-time augmentation set.

    ``params`` holds the photometric magnitude: the brightness delta, the
    contrast gain, the per-channel RGB shift or the smoothing sigma.
    """

    kind: str
    params: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in GEOMETRIC_KINDS + PHOTOMETRIC_KINDS:
            raise ConfigError(f"unknown TTA transform {self.kind!r}")

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    def __str__(self) -> str:
        if not self.params:
            return self.kind
        return f"{self.kind}({','.join(f'{v:g}' for v in self.params)})"

    @classmethod
    def parse(cls, text: str) -> "TtaTransform":
        text = text.strip()
        if "(" not in text:
            return cls(text)
        kind, rest = text.split("(", 1)
        values = tuple(float(v) for v in rest.rstrip(")").split(",") if v.strip())
        return cls(kind.strip(), values)


IDENTITY = TtaTransform("identity")

DEFAULT_TTA = (
    IDENTITY,
    TtaTransform("rot90"),
    TtaTransform("rot180"),
    TtaTransform("rot270"),
    TtaTransform("flip_h"),
    TtaTransform("flip_v"),
    TtaTransform("brightness", (0.1,)),
    TtaTransform("smooth", (1.0,)),
)


def _grid(a: np.ndarray, kind: str, inverse: bool) -> np.ndarray:
    if kind == "identity":
        return a
    if kind in ("rot90", "rot270"):
        if a.shape[0] != a.shape[1]:
            raise GeometryError(f"{kind} needs a square input, got {a.shape[:2]}")
        k = 1 if kind == "rot90" else 3
        return np.ascontiguousarray(np.rot90(a, -k if inverse else k, axes=(0, 1)))
    if kind == "rot180":
        return np.ascontiguousarray(np.rot90(a, 2, axes=(0, 1)))
    if kind == "flip_h":
        return np.ascontiguousarray(a[:, ::-1])
    if kind == "flip_v":
        return np.ascontiguousarray(a[::-1])
    raise AssertionError(kind)


def tta_forward(image: np.ndarray, t: TtaTransform) -> np.ndarray:
    """Apply ``t`` to a float ``(H, W, C)`` image in [0, 1]."""
    if t.geometric:
        return _grid(image, t.kind, inverse=False)
    out = np.asarray(image, dtype=np.float32)
    if t.kind == "brightness":
        out = out + np.float32(t.params[0])
    elif t.kind == "contrast":
        out = (out - np.float32(0.5)) * np.float32(t.params[0]) + np.float32(0.5)
    elif t.kind == "rgb_shift":
        out = out + np.asarray(t.params, dtype=np.float32)
    elif t.kind == "smooth":
        s = t.params[0]
        out = ndimage.gaussian_filter(out, (s, s, 0.0) if out.ndim == 3 else s, mode="mirror")
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def tta_forward_mask(prob: np.ndarray, t: TtaTransform) -> np.ndarray:
    """Mask-space image of ``t``: the grid part only."""
    return _grid(prob, t.kind, inverse=False) if t.geometric else prob


def tta_inverse(prob: np.ndarray, t: TtaTransform) -> np.ndarray:
    """Map a prediction made on ``tta_forward(x, t)`` back onto the grid of ``x``."""
    return _grid(prob, t.kind, inverse=True) if t.geometric else prob
