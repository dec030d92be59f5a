import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from pniseg.data import (SampleEntry, SampleManifest, SynthConfig, generate_synthetic, load_manifest, load_pair,
                         read_image, read_mask, read_prob, save_manifest, write_image, write_prob)
from pniseg.errors import ConfigError, DanglingPathError, DuplicateIdError, ManifestParseError
from pniseg.morphology import is_thin


def _write_manifest(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def _dummy_files(root, n, split="train"):
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    recs = []
    for i in range(n):
        sid = f"{split}-{i:03d}"
        write_image(root / "images" / f"{sid}.png", np.zeros((4, 4, 3), np.uint8))
        Image.fromarray(np.zeros((4, 4), np.uint8)).save(root / "masks" / f"{sid}.png")
        recs.append({"sample_id": sid, "image_path": f"images/{sid}.png", "mask_path": f"masks/{sid}.png",
                     "organ": "colon", "split": split})
    return recs


def test_manifest_counts(tmp_path):
    recs = _dummy_files(tmp_path, 150) + _dummy_files(tmp_path, 30, "val")
    _write_manifest(tmp_path / "manifest.jsonl", recs[::-1])
    m = load_manifest(tmp_path / "manifest.jsonl")
    assert m.summary() == {"train": 150, "val": 30, "test": 0, "total": 180}
    assert m.ids() == sorted(m.ids())


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert len(load_manifest(tmp_path)) == 0


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")
    recs = _dummy_files(tmp_path, 2)
    _write_manifest(tmp_path / "dup.jsonl", [recs[0], recs[1], recs[0]])
    with pytest.raises(DuplicateIdError, match="train-000"):
        load_manifest(tmp_path / "dup.jsonl")
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(ManifestParseError):
        load_manifest(tmp_path / "bad.jsonl")
    _write_manifest(tmp_path / "dangling.jsonl", [{**recs[0], "image_path": "images/missing.png"}])
    with pytest.raises(DanglingPathError):
        load_manifest(tmp_path / "dangling.jsonl")
    _write_manifest(tmp_path / "extra.jsonl", [{**recs[0], "stain": "HE"}])
    with pytest.raises(ManifestParseError):
        load_manifest(tmp_path / "extra.jsonl")
    with pytest.warns(UserWarning):
        assert len(load_manifest(tmp_path / "extra.jsonl", strict=False)) == 1


def test_manifest_roundtrip(tmp_path):
    recs = _dummy_files(tmp_path, 3)
    _write_manifest(tmp_path / "manifest.jsonl", recs)
    m = load_manifest(tmp_path)
    save_manifest(m, tmp_path / "copy.jsonl")
    assert load_manifest(tmp_path / "copy.jsonl").entries == m.entries
    assert (tmp_path / "copy.jsonl").read_text() == (tmp_path / "manifest.jsonl").read_text()


def test_image_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (17, 23, 3), dtype=np.uint8)
    write_image(tmp_path / "x.png", img)
    assert np.array_equal(read_image(tmp_path / "x.png"), img)


def test_prob_roundtrip(tmp_path, rng):
    p = rng.random((9, 11)).astype(np.float32)
    write_prob(tmp_path / "p.png", p)
    assert np.abs(read_prob(tmp_path / "p.png") - p).max() <= 0.5 / 65535 + 1e-7


def test_grayscale_mask(tmp_path):
    m = np.zeros((6, 6), np.uint8)
    m[2, 1:5] = 255
    Image.fromarray(m).save(tmp_path / "m.png")
    assert np.array_equal(read_mask(tmp_path / "m.png"), m > 0)


def test_rgb_mask_channel_max(tmp_path, rng):
    rgb = np.zeros((12, 12, 3), np.uint8)
    rgb[3, :, 0] = 255
    rgb[7, 2:9, 0] = rng.integers(1, 256, 7)
    rgb[9, 4, 2] = 3
    Image.fromarray(rgb).save(tmp_path / "m.png")
    assert np.array_equal(read_mask(tmp_path / "m.png"), rgb.max(axis=2) > 0)


def test_load_pair(tmp_path):
    m = generate_synthetic(SynthConfig(count=2, extent=128, seed=3), tmp_path)
    img, mask = load_pair(m.entries[0])
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8
    assert mask.shape == (128, 128) and mask.dtype == bool


def test_generator_determinism(tmp_path):
    cfg = SynthConfig(count=3, extent=128, seed=11)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    for sub in ("images", "masks"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()


def test_zero_contact_gives_empty_masks(tmp_path):
    m = generate_synthetic(SynthConfig(count=3, extent=128, seed=2, contact_fraction=(0.0, 0.0)), tmp_path)
    for e in m:
        assert not load_pair(e)[1].any()


def test_generated_masks_are_thin_connected_arcs(tmp_path):
    m = generate_synthetic(SynthConfig(count=100, extent=128, seed=5), tmp_path)
    assert len(load_manifest(tmp_path)) == 100
    for e in m:
        img, mask = load_pair(e)
        assert mask.any()
        assert is_thin(mask)
        labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
        # one open arc per contacting nerve
        assert 1 <= n <= 4
        for lab in range(1, n + 1):
            arc = labels == lab
            degree = ndimage.convolve(arc.astype(int), np.ones((3, 3), int), mode="constant") - 1
            assert (degree[arc] <= 2).all()
            assert (degree[arc] == 1).sum() == 2


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(extent=100)
    with pytest.raises(ConfigError):
        SynthConfig(nerves_per_image=(3, 1))
