"""Tiled ensemble inference with test-time augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .augment import DEFAULT_TTA, IDENTITY, TtaTransform, tta_forward, tta_inverse
from .errors import ConfigError, GeometryError
from .metrics import DEFAULT_TOLERANCE, BoundaryScore, dataset_f1
from .morphology import skeletonize
from .raster import Rect, crop, to_float
from .tiling import StitchBuffer, plan_tiles

log = logging.getLogger(__name__)

# Maps an (N, H, W, 3) float32 batch in [0, 1] to (N, H, W) logits.
Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class InferenceConfig:
    tile: int = 512
    stride: int = 256
    tta_set: tuple[TtaTransform, ...] = DEFAULT_TTA
    threshold: float = 0.5
    use_overlap: bool = True
    use_tta: bool = True

    def __post_init__(self):
        self.tta_set = tuple(t if isinstance(t, TtaTransform) else TtaTransform.parse(t) for t in self.tta_set)
        if not 1 <= self.stride <= self.tile:
            raise ConfigError(f"need 1 <= stride <= tile, got stride={self.stride}, tile={self.tile}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if IDENTITY not in self.tta_set:
            raise ConfigError("the TTA set must contain the identity transform")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.use_overlap else self.tile

    @property
    def transforms(self) -> tuple[TtaTransform, ...]:
        return self.tta_set if self.use_tta else (IDENTITY,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tta_set"] = [str(t) for t in self.tta_set]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PredictionResult:
    prob: np.ndarray
    boundary: np.ndarray
    provenance: dict = field(default_factory=dict)


def as_predictors(bundle) -> list[Predictor]:
    """Accept a trained bundle (anything with ``predictors()``) or a list of callables."""
    if hasattr(bundle, "predictors"):
        return list(bundle.predictors())
    if callable(bundle):
        return [bundle]
    models = list(bundle)
    if not models or not all(callable(m) for m in models):
        raise ConfigError("a bundle must provide at least one predictor")
    return models


def _float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return to_float(image)
    return np.asarray(image, dtype=np.float32)


def predict_tile(bundle, tile_img: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Flat mean of sigmoid outputs over every (model, transform) pair.

    Accumulation runs model-major then transform, in float64, so the result
    does not depend on anything but the inputs.
    """
    models = as_predictors(bundle)
    tile_img = _float_image(tile_img)
    transforms = cfg.transforms
    acc = np.zeros(tile_img.shape[:2], dtype=np.float64)
    batch = np.stack([tta_forward(tile_img, t) for t in transforms])
    for model in models:
        logits = np.asarray(model(batch), dtype=np.float32)
        if logits.shape != batch.shape[:3]:
            raise ConfigError(f"predictor returned {logits.shape}, expected {batch.shape[:3]}")
        probs = expit(logits)
        for p, t in zip(probs, transforms):
            acc += tta_inverse(p, t)
    return (acc / (len(models) * len(transforms))).astype(np.float32)


def predict_image(bundle, image: np.ndarray, cfg: InferenceConfig, bundle_hash: str | None = None) -> PredictionResult:
    """Tile, predict, average, threshold and thin a whole image.

    Images smaller than one tile are reflect-padded up to the tile size and
    the stitched map is cropped back afterwards.
    """
    t0 = time.perf_counter()
    models = as_predictors(bundle)
    img = _float_image(image)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise GeometryError("cannot predict an empty image")
    ph, pw = max(h, cfg.tile), max(w, cfg.tile)
    if (ph, pw) != (h, w):
        img = crop(img, Rect(0, 0, ph, pw), pad="reflect")
    plan = plan_tiles(ph, pw, cfg.tile, cfg.effective_stride)
    buf = StitchBuffer(ph, pw)
    t = cfg.tile
    for y, x in plan:
        buf.commit((y, x), predict_tile(models, img[y:y + t, x:x + t], cfg))
    prob = buf.finalize()[:h, :w]
    boundary = skeletonize(prob >= cfg.threshold)
    if bundle_hash is None and hasattr(bundle, "digest"):
        bundle_hash = bundle.digest()
    provenance = {
        "config_hash": cfg.digest(),
        "bundle_hash": bundle_hash,
        "tiles": len(plan),
        "models": len(models),
        "transforms": [str(tr) for tr in cfg.transforms],
        "seconds": round(time.perf_counter() - t0, 4),
    }
    log.debug("predicted %dx%d image with %d tiles", h, w, len(plan))
    return PredictionResult(prob, boundary, provenance)


def overlay(image: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    """Source image with boundary pixels painted red."""
    out = np.array(image if image.dtype == np.uint8 else np.clip(np.rint(image * 255), 0, 255), dtype=np.uint8)
    out[boundary] = (255, 0, 0)
    return out


def write_prediction(out_dir, sample_id: str, image: np.ndarray, result: PredictionResult) -> dict[str, Path]:
    from .data import write_image, write_mask, write_prob

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "prob": out / f"{sample_id}_prob.png",
        "boundary": out / f"{sample_id}_boundary.png",
        "overlay": out / f"{sample_id}_overlay.png",
        "provenance": out / f"{sample_id}_provenance.json",
    }
    write_prob(paths["prob"], result.prob)
    write_mask(paths["boundary"], result.boundary, one_bit=True)
    write_image(paths["overlay"], overlay(image, result.boundary))
    paths["provenance"].write_text(json.dumps({"sample_id": sample_id, **result.provenance}, indent=2, sort_keys=True))
    return paths


# Ablation rows: (label, bundle variant, overlapping tiles, TTA).
ABLATION_ROWS = (
    ("Without Augmentation", "noaug", False, False),
    ("Augmentation + TTA", "aug", False, True),
    ("Augmentation + overlapping patch extraction", "aug", True, False),
    ("Augmentation + overlapping patch extraction + TTA", "aug", True, True),
)


@dataclass
class AblationRow:
    label: str
    variant: str
    use_overlap: bool
    use_tta: bool
    score: BoundaryScore

    @property
    def f1(self) -> float:
        return self.score.f1


def ablation_run(bundles: dict, pairs: Sequence[tuple[np.ndarray, np.ndarray]], cfg: InferenceConfig,
                 tau: int = DEFAULT_TOLERANCE) -> list[AblationRow]:
    """Score the four pipeline configurations over ``(image, gt)`` pairs.

    ``bundles`` maps ``"aug"`` and ``"noaug"`` to trained bundles.
    """
    missing = {v for _, v, _, _ in ABLATION_ROWS} - set(bundles)
    if missing:
        raise ConfigError(f"ablation needs bundle variants {sorted(missing)}")
    rows = []
    for label, variant, overlap, tta in ABLATION_ROWS:
        row_cfg = InferenceConfig(cfg.tile, cfg.stride, cfg.tta_set, cfg.threshold, overlap, tta)
        preds = [(predict_image(bundles[variant], img, row_cfg).boundary, gt) for img, gt in pairs]
        rows.append(AblationRow(label, variant, overlap, tta, dataset_f1(preds, tau)))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'Method':<{width}}  F1-score"]
    lines += [f"{r.label:<{width}}  {100 * r.f1:6.2f} %" for r in rows]
    return "\n".join(lines)
