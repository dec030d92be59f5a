"""Tolerance-based boundary precision, recall and F1."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError
from .morphology import dilate, disk, is_thin
from .raster import as_mask

DEFAULT_TOLERANCE = 3


def _ratio(hit: int, n: int, n_other: int) -> float:
    # An empty side scores 1 only when the other side is empty too.
    if n == 0:
        return 1.0 if n_other == 0 else 0.0
    return hit / n


@dataclass(frozen=True)
class BoundaryScore:
    tp_pred: int
    n_pred: int
    tp_gt: int
    n_gt: int
    tolerance: int = DEFAULT_TOLERANCE

    @property
    def precision(self) -> float:
        return _ratio(self.tp_pred, self.n_pred, self.n_gt)

    @property
    def recall(self) -> float:
        return _ratio(self.tp_gt, self.n_gt, self.n_pred)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other: "BoundaryScore") -> "BoundaryScore":
        if other.tolerance != self.tolerance:
            raise ConfigError("cannot pool scores computed at different tolerances")
        return BoundaryScore(self.tp_pred + other.tp_pred, self.n_pred + other.n_pred,
                             self.tp_gt + other.tp_gt, self.n_gt + other.n_gt, self.tolerance)

    def as_row(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "n_pred": self.n_pred, "n_gt": self.n_gt, "tolerance": self.tolerance}


def boundary_f1(pred: np.ndarray, gt: np.ndarray, tau: int = DEFAULT_TOLERANCE) -> BoundaryScore:
    """Score ``pred`` against ``gt``: a pixel matches if the other mask has a pixel within ``tau``."""
    pred, gt = as_mask(pred), as_mask(gt)
    if pred.shape != gt.shape:
        raise GeometryError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not (is_thin(pred) and is_thin(gt)):
        warnings.warn("boundary_f1 called on masks that are not 1-pixel thin")
    se = disk(tau)
    tp_pred = int((pred & dilate(gt, se)).sum())
    tp_gt = int((gt & dilate(pred, se)).sum())
    return BoundaryScore(tp_pred, int(pred.sum()), tp_gt, int(gt.sum()), tau)


def dataset_f1(pairs, tau: int = DEFAULT_TOLERANCE) -> BoundaryScore:
    """Micro-average: pool the match counts over all pairs, then divide once."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("dataset_f1 needs at least one (pred, gt) pair")
    total = BoundaryScore(0, 0, 0, 0, tau)
    for pred, gt in pairs:
        total = total + boundary_f1(pred, gt, tau)
    return total


REPORT_FIELDS = ("image_id", "precision", "recall", "f1", "n_pred", "n_gt")


def write_report(out_prefix, rows: dict[str, BoundaryScore], summary: BoundaryScore) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (one row per image plus ``__dataset__``) and ``<prefix>.json``."""
    out_prefix = Path(out_prefix)
    csv_path, json_path = out_prefix.with_suffix(".csv"), out_prefix.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS + ("tolerance",))
        for image_id, s in sorted(rows.items()):
            writer.writerow([image_id, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}", s.n_pred, s.n_gt, s.tolerance])
        writer.writerow(["__dataset__", f"{summary.precision:.6f}", f"{summary.recall:.6f}",
                         f"{summary.f1:.6f}", summary.n_pred, summary.n_gt, summary.tolerance])
    record = {
        "tolerance": summary.tolerance,
        "images": [{"image_id": k, **v.as_row(), **asdict(v)} for k, v in sorted(rows.items())],
        "dataset": {**summary.as_row(), **asdict(summary)},
    }
    json_path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return csv_path, json_path
