import json
import warnings

import numpy as np
import pytest

from conftest import random_thin
from pniseg.errors import ConfigError, GeometryError
from pniseg.metrics import BoundaryScore, boundary_f1, dataset_f1, write_report


def bruteforce_counts(pred, gt, tau):
    """Match counts from all pairwise squared distances."""
    p = np.argwhere(pred)
    g = np.argwhere(gt)
    if len(p) and len(g):
        d2 = ((p[:, None, :] - g[None, :, :]) ** 2).sum(-1)
        tp_pred = int((d2.min(axis=1) <= tau * tau).sum())
        tp_gt = int((d2.min(axis=0) <= tau * tau).sum())
    else:
        tp_pred = tp_gt = 0
    return tp_pred, len(p), tp_gt, len(g)


def line(shape, row):
    m = np.zeros(shape, bool)
    m[row] = True
    return m


def test_identical_masks():
    gt = line((20, 30), 10)
    s = boundary_f1(gt, gt, 3)
    assert s.precision == s.recall == s.f1 == 1.0


def test_empty_prediction():
    s = boundary_f1(np.zeros((20, 30), bool), line((20, 30), 10), 3)
    assert s.f1 == 0.0 and s.precision == 0.0 and s.recall == 0.0


def test_both_empty_scores_one():
    e = np.zeros((8, 8), bool)
    s = boundary_f1(e, e, 3)
    assert s.precision == s.recall == s.f1 == 1.0


def test_empty_gt_with_prediction():
    s = boundary_f1(line((8, 8), 3), np.zeros((8, 8), bool), 3)
    assert s.precision == 0.0 and s.f1 == 0.0


@pytest.mark.parametrize("tau,expected", [(3, 1.0), (2, 1.0), (1, 0.0)])
def test_shifted_line(tau, expected):
    gt = line((20, 40), 8)
    pred = line((20, 40), 10)
    s = boundary_f1(pred, gt, tau)
    assert s.f1 == expected
    assert (s.tp_pred, s.n_pred, s.tp_gt, s.n_gt) == bruteforce_counts(pred, gt, tau)


@pytest.mark.parametrize("tau", [1, 3, 5])
@pytest.mark.parametrize("seed", range(100))
def test_matches_bruteforce_oracle(seed, tau):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(8, 65, size=2))
    pred, gt = random_thin(rng, shape), random_thin(rng, shape)
    s = boundary_f1(pred, gt, tau)
    assert (s.tp_pred, s.n_pred, s.tp_gt, s.n_gt) == bruteforce_counts(pred, gt, tau)
    assert 0 <= s.f1 <= 1 and s.tp_pred <= s.n_pred and s.tp_gt <= s.n_gt
    flipped = boundary_f1(gt, pred, tau)
    assert flipped.f1 == pytest.approx(s.f1, abs=1e-15)
    assert flipped.precision == s.recall


@pytest.mark.parametrize("seed", range(20))
def test_monotone_in_tolerance(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_thin(rng), random_thin(rng)
    f1s = [boundary_f1(pred, gt, t).f1 for t in range(0, 8)]
    assert all(a <= b + 1e-12 for a, b in zip(f1s, f1s[1:]))


def test_f1_is_harmonic_mean():
    s = BoundaryScore(3, 4, 1, 5)
    p, r = 0.75, 0.2
    assert s.f1 == pytest.approx(2 * p * r / (p + r))


def test_extent_mismatch():
    with pytest.raises(GeometryError):
        boundary_f1(np.zeros((4, 4), bool), np.zeros((4, 5), bool))


def test_thick_input_warns():
    m = np.ones((4, 4), bool)
    with pytest.warns(UserWarning):
        boundary_f1(m, m)


def test_dataset_single_pair_equals_pair():
    rng = np.random.default_rng(0)
    pred, gt = random_thin(rng), random_thin(rng)
    assert dataset_f1([(pred, gt)], 3) == boundary_f1(pred, gt, 3)


def test_dataset_micro_average():
    gt = line((10, 20), 5)
    far = line((10, 20), 0)
    far_gt = line((10, 20), 9)
    s = dataset_f1([(gt, gt), (far, far_gt)], 3)
    assert s.precision == 0.5 and s.recall == 0.5 and s.f1 == 0.5


def test_dataset_duplication_invariant():
    rng = np.random.default_rng(1)
    pairs = [(random_thin(rng), random_thin(rng)) for _ in range(4)]
    a = dataset_f1(pairs, 3)
    b = dataset_f1(pairs + pairs, 3)
    assert a.f1 == pytest.approx(b.f1, abs=1e-15)


def test_dataset_empty_list():
    with pytest.raises(ConfigError):
        dataset_f1([], 3)


def test_report_files(tmp_path):
    gt = line((10, 20), 5)
    rows = {"b": boundary_f1(gt, gt), "a": boundary_f1(np.zeros_like(gt), gt)}
    summary = rows["a"] + rows["b"]
    csv_path, json_path = write_report(tmp_path / "report", rows, summary)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "image_id,precision,recall,f1,n_pred,n_gt,tolerance"
    assert lines[1].startswith("a,") and lines[-1].startswith("__dataset__,")
    rec = json.loads(json_path.read_text())
    assert rec["dataset"]["f1"] == pytest.approx(summary.f1)
    assert [r["image_id"] for r in rec["images"]] == ["a", "b"]
