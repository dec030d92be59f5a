import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import pniseg.training as training
from pniseg.augment import AugmentConfig
from pniseg.data import SynthConfig, generate_synthetic
from pniseg.errors import ConfigError, NumericError
from pniseg.inference import InferenceConfig
from pniseg.model import FpnConfig, build_model, init_params
from pniseg.training import (FoldAssignment, ModelBundle, TrainConfig, TrainingAborted, evaluate, kfold_split,
                             load_bundle, lr_at, save_bundle, steps_per_epoch, train_all, train_fold)

SMALL_MODEL = FpnConfig(pyramid_channels=32, head_channels=16)
NO_AUG = AugmentConfig(enabled=False)


def small_cfg(**kw):
    base = dict(epochs=3, batch_size=4, lr_max=3e-3, lr_base=3e-4, cycle_epochs=4, tile=64, k=2)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    return generate_synthetic(SynthConfig(count=8, extent=128, seed=3), tmp_path_factory.mktemp("small"))


# -- k-fold -------------------------------------------------------------------

def test_kfold_eight_by_four():
    ids = [f"s{i}" for i in range(8)]
    folds = kfold_split(ids, 4, seed=0)
    assert folds.sizes() == [2, 2, 2, 2]
    assert sorted(sum((folds.members(f) for f in range(4)), [])) == sorted(ids)
    assert folds.outside(1) == sorted(set(ids) - set(folds.members(1)))


def test_kfold_uneven_sizes():
    folds = kfold_split([f"id{i:03d}" for i in range(150)], 4, seed=11)
    assert sorted(folds.sizes(), reverse=True) == [38, 38, 37, 37]


def test_kfold_deterministic_and_order_free():
    ids = [f"x{i}" for i in range(40)]
    a = kfold_split(ids, 5, seed=2)
    assert a == kfold_split(list(reversed(ids)), 5, seed=2)
    assert a != kfold_split(ids, 5, seed=3)


def test_kfold_rejects_bad_input():
    with pytest.raises(ConfigError):
        kfold_split(["a", "b"], 3)
    with pytest.raises(ConfigError):
        kfold_split(["a", "a", "b"], 2)


@settings(max_examples=500, deadline=None)
@given(n=st.integers(1, 300), k=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_kfold_partition(n, k, seed):
    ids = [f"s{i}" for i in range(n)]
    if n < k:
        with pytest.raises(ConfigError):
            kfold_split(ids, k, seed)
        return
    folds = kfold_split(ids, k, seed)
    members = [folds.members(f) for f in range(k)]
    # disjoint and covering
    assert sum(len(m) for m in members) == n
    assert set().union(*map(set, members)) == set(ids)
    sizes = [len(m) for m in members]
    assert max(sizes) - min(sizes) <= 1
    for f in range(k):
        assert set(folds.outside(f)) | set(members[f]) == set(ids)
        assert not set(folds.outside(f)) & set(members[f])


# -- learning-rate schedule ------------------------------------------------------

def test_lr_endpoints_exact():
    cfg = TrainConfig()
    spe = 13
    assert lr_at(0, spe, cfg) == 1e-5
    assert lr_at(4 * spe, spe, cfg) == 1e-4
    assert lr_at(8 * spe, spe, cfg) == 1e-5
    assert lr_at(16 * spe, spe, cfg) == 1e-5


def test_lr_quarter_cycle():
    cfg = TrainConfig()
    assert lr_at(2 * 10, 10, cfg) == pytest.approx(5.5e-5, rel=1e-12)


def test_lr_periodic_bounded_piecewise_linear():
    cfg = TrainConfig(cycle_epochs=4, lr_base=2e-5, lr_max=3e-4)
    spe = 5
    period = cfg.cycle_epochs * spe
    lrs = np.array([lr_at(s, spe, cfg) for s in range(5 * period)])
    assert np.all(lrs >= cfg.lr_base - 1e-18) and np.all(lrs <= cfg.lr_max + 1e-18)
    np.testing.assert_allclose(lrs[:period], lrs[period:2 * period], rtol=1e-12)
    second = lrs[2:] - 2 * lrs[1:-1] + lrs[:-2]
    vertices = {s for s in range(1, len(lrs) - 1) if s % (period // 2) == 0}
    for s, d2 in enumerate(second, start=1):
        if s not in vertices:
            assert abs(d2) < 1e-15, s
    assert lrs.argmax() == period // 2


def test_lr_rejects_zero_steps():
    with pytest.raises(ConfigError):
        lr_at(0, 0, TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(k=1)
    with pytest.raises(ConfigError):
        TrainConfig(tile=100)
    with pytest.raises(ConfigError):
        TrainConfig(lr_base=1e-3, lr_max=1e-4)


def test_steps_per_epoch():
    assert steps_per_epoch(64, 8) == 8
    assert steps_per_epoch(65, 8) == 9
    assert steps_per_epoch(1, 8) == 1


# -- training loop ---------------------------------------------------------------

def test_step_count_and_log(small_set, tmp_path):
    folds = kfold_split(small_set.ids(), 2, 0)
    cfg = small_cfg(epochs=2)
    ckpt = train_fold(small_set, folds, 0, cfg, SMALL_MODEL, NO_AUG, log_path=tmp_path / "log.jsonl")
    tiles = len(folds.outside(0)) * (128 // 64) ** 2
    assert ckpt.meta["tiles"] == tiles
    assert ckpt.meta["steps"] == cfg.epochs * math.ceil(tiles / cfg.batch_size)
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    steps = [r for r in records if r["type"] == "step"]
    epochs = [r for r in records if r["type"] == "epoch"]
    assert len(steps) == ckpt.meta["steps"] and len(epochs) == cfg.epochs
    assert steps[0]["lr"] == cfg.lr_base
    f1s = [r["held_out_f1"] for r in epochs]
    assert ckpt.meta["best_f1"] == max(f1s)
    assert ckpt.meta["best_epoch"] == f1s.index(max(f1s))


def test_training_is_deterministic(small_set):
    folds = kfold_split(small_set.ids(), 2, 0)
    a = train_fold(small_set, folds, 1, small_cfg(epochs=2), SMALL_MODEL)
    b = train_fold(small_set, folds, 1, small_cfg(epochs=2), SMALL_MODEL)
    assert a.meta == b.meta
    for name in a.params:
        assert torch.equal(a.params[name], b.params[name]), name


def test_training_beats_untrained(small_set):
    folds = kfold_split(small_set.ids(), 2, 0)
    cfg = small_cfg(epochs=12, seed=1)
    ckpt = train_fold(small_set, folds, 0, cfg, SMALL_MODEL, NO_AUG)
    held_out = [small_set.by_id()[i] for i in folds.members(0)]
    untrained = training.NetPredictor(build_model(SMALL_MODEL, init_params(SMALL_MODEL, cfg.seed)))
    ev = InferenceConfig(tile=64, stride=64, use_overlap=False, use_tta=False)
    before = evaluate([untrained], held_out, ev).f1
    after = evaluate([training.NetPredictor(ckpt.build())], held_out, ev).f1
    assert after > before
    assert after == pytest.approx(ckpt.meta["best_f1"])


def test_fold_out_of_range(small_set):
    folds = kfold_split(small_set.ids(), 2, 0)
    with pytest.raises(ConfigError):
        train_fold(small_set, folds, 2, small_cfg(), SMALL_MODEL)


def test_empty_training_split(small_set):
    lonely = FoldAssignment(2, {i: 0 for i in small_set.ids()})
    with pytest.raises(ConfigError):
        train_fold(small_set, lonely, 0, small_cfg(), SMALL_MODEL)


def test_nan_loss_aborts_with_last_good(small_set, monkeypatch):
    real = training.bce_dice_loss
    calls = {"n": 0}

    def poisoned(logits, target):
        calls["n"] += 1
        if calls["n"] > 5:
            logits = logits * float("nan")
        return real(logits, target)

    monkeypatch.setattr(training, "bce_dice_loss", poisoned)
    folds = kfold_split(small_set.ids(), 2, 0)
    with pytest.raises(TrainingAborted) as info:
        train_fold(small_set, folds, 0, small_cfg(epochs=3), SMALL_MODEL, NO_AUG)
    assert isinstance(info.value, NumericError)
    last_good = info.value.checkpoint
    assert last_good.meta["aborted_at_step"] == 5
    assert last_good.meta["best_epoch"] == 0
    assert all(torch.isfinite(t).all() for t in last_good.params.values())


def test_train_all_partial_bundle(small_set, monkeypatch, tmp_path):
    real = training.train_fold

    def fail_second(manifest, folds, fold, *args, **kw):
        if fold == 1:
            raise NumericError("boom")
        return real(manifest, folds, fold, *args, **kw)

    monkeypatch.setattr(training, "train_fold", fail_second)
    folds = kfold_split(small_set.ids(), 2, 0)
    with pytest.raises(NumericError) as info:
        train_all(small_set, folds, small_cfg(epochs=1), SMALL_MODEL, NO_AUG, out_dir=tmp_path)
    assert info.value.bundle.partial and len(info.value.bundle) == 1
    assert load_bundle(tmp_path).partial


def test_train_all_rejects_single_fold(small_set):
    with pytest.raises(ConfigError):
        train_all(small_set, FoldAssignment(1, {i: 0 for i in small_set.ids()}), small_cfg(), SMALL_MODEL)


def test_bundle_round_trip(small_set, tmp_path):
    folds = kfold_split(small_set.ids(), 2, 0)
    bundle = train_all(small_set, folds, small_cfg(epochs=1), SMALL_MODEL, NO_AUG, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "bundle.json", "fold0.ckpt", "fold0.log.jsonl", "fold1.ckpt", "fold1.log.jsonl"]
    loaded = load_bundle(tmp_path)
    assert loaded.digest() == bundle.digest() and not loaded.partial
    x = np.random.default_rng(0).random((2, 64, 64, 3), dtype=np.float32)
    for p, q in zip(bundle.predictors(), loaded.predictors()):
        assert np.array_equal(p(x), q(x))


def test_bundle_checksum_mismatch(small_set, tmp_path):
    folds = kfold_split(small_set.ids(), 2, 0)
    train_all(small_set, folds, small_cfg(epochs=1), SMALL_MODEL, NO_AUG, out_dir=tmp_path)
    raw = bytearray((tmp_path / "fold0.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "fold0.ckpt").write_bytes(bytes(raw))
    with pytest.raises(Exception, match="checksum"):
        load_bundle(tmp_path)


def test_bundle_rejects_mixed_models(small_set):
    folds = kfold_split(small_set.ids(), 2, 0)
    a = train_fold(small_set, folds, 0, small_cfg(epochs=1), SMALL_MODEL, NO_AUG)
    b = train_fold(small_set, folds, 1, small_cfg(epochs=1), FpnConfig(pyramid_channels=16, head_channels=8), NO_AUG)
    with pytest.raises(ConfigError):
        ModelBundle([a, b])


@pytest.mark.slow
def test_smoke_learning_halves_loss(tmp_path):
    """50 synthetic samples, 5 epochs of the tiny model: loss drops by half (median of 3 seeds)."""
    manifest = generate_synthetic(SynthConfig(count=50, extent=256, seed=0), tmp_path / "d")
    model_cfg = FpnConfig(pyramid_channels=64, head_channels=32)
    folds = kfold_split(manifest.ids(), 4, 0)
    drops = []
    for seed in range(3):
        cfg = TrainConfig(epochs=5, lr_max=3e-3, lr_base=3e-4, tile=128, seed=seed)
        log_path = tmp_path / f"log{seed}.jsonl"
        ckpt = train_fold(manifest, folds, 0, cfg, model_cfg, NO_AUG, log_path=log_path)
        steps = [r for r in map(json.loads, log_path.read_text().splitlines()) if r["type"] == "step"]
        last_epoch = [r["total"] for r in steps[-ckpt.meta["steps_per_epoch"]:]]
        drops.append(1.0 - np.mean(last_epoch) / steps[0]["total"])
    assert np.median(drops) >= 0.5, drops
