"""Dataset manifests, image/mask I/O and a synthetic H&E-like generator."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DanglingPathError, DataError, DuplicateIdError, GeometryError, ManifestParseError
from .morphology import is_thin
from .raster import as_mask, quantize_u8

log = logging.getLogger(__name__)

ORGANS = ("colon", "prostate", "pancreas", "synthetic")
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"
FIELDS = ("sample_id", "image_path", "mask_path", "organ", "split")


@dataclass
class SampleEntry:
    sample_id: str
    image_path: str
    mask_path: str | None
    organ: str = "synthetic"
    split: str = "train"
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.organ not in ORGANS:
            raise DataError(f"{self.sample_id}: unknown organ {self.organ!r}")
        if self.split not in SPLITS:
            raise DataError(f"{self.sample_id}: unknown split {self.split!r}")

    @property
    def image_file(self) -> Path:
        return Path(self.root or ".") / self.image_path

    @property
    def mask_file(self) -> Path | None:
        return None if self.mask_path is None else Path(self.root or ".") / self.mask_path

    def record(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}


@dataclass
class SampleManifest:
    root: Path
    entries: list[SampleEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def by_id(self) -> dict[str, SampleEntry]:
        return {e.sample_id: e for e in self.entries}

    def subset(self, ids) -> "SampleManifest":
        keep = set(ids)
        return SampleManifest(self.root, [e for e in self.entries if e.sample_id in keep])

    def summary(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        counts["total"] = len(self.entries)
        return counts


def save_manifest(manifest: SampleManifest, path=None) -> Path:
    path = Path(path) if path else Path(manifest.root) / MANIFEST_NAME
    with open(path, "w") as fh:
        for e in sorted(manifest.entries, key=lambda e: e.sample_id):
            fh.write(json.dumps(e.record()) + "\n")
    return path


def load_manifest(path, strict: bool = True) -> SampleManifest:
    """Read a JSON-lines manifest; paths are relative to its directory.

    Raises FileNotFoundError, :class:`ManifestParseError`,
    :class:`DanglingPathError` or :class:`DuplicateIdError`.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
        if not isinstance(rec, dict):
            raise ManifestParseError(f"{path}:{lineno}: record is not an object")
        unknown = set(rec) - set(FIELDS)
        if unknown:
            msg = f"{path}:{lineno}: unknown fields {sorted(unknown)}"
            if strict:
                raise ManifestParseError(msg)
            warnings.warn(msg)
        missing = {"sample_id", "image_path"} - set(rec)
        if missing:
            raise ManifestParseError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        try:
            entry = SampleEntry(**{k: rec.get(k) for k in FIELDS if k in rec}, root=root)
        except TypeError as exc:
            raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
        if entry.sample_id in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate sample_id {entry.sample_id!r}")
        seen.add(entry.sample_id)
        for f in (entry.image_file, entry.mask_file):
            if f is not None and not f.is_file():
                raise DanglingPathError(f"{path}:{lineno}: {entry.sample_id}: missing file {f}")
        entries.append(entry)
    entries.sort(key=lambda e: e.sample_id)
    return SampleManifest(root, entries)


# -- image files -------------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_mask(path, mask: np.ndarray, one_bit: bool = False) -> None:
    m = as_mask(mask)
    if one_bit:
        Image.fromarray(m).convert("1").save(path)
    else:
        Image.fromarray(m.astype(np.uint8) * 255).save(path)


def read_mask(path) -> np.ndarray:
    """Decode a mask file; any nonzero sample in any channel counts as boundary."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    return as_mask(arr != 0)


def write_prob(path, prob: np.ndarray) -> None:
    """Store a [0, 1] map as a 16-bit grayscale PNG."""
    q = np.clip(np.rint(np.asarray(prob, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_prob(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float64)
    return (arr / 65535.0).astype(np.float32)


def load_pair(entry: SampleEntry) -> tuple[np.ndarray, np.ndarray]:
    image = read_image(entry.image_file)
    if entry.mask_file is None:
        raise DataError(f"{entry.sample_id}: no mask recorded")
    mask = read_mask(entry.mask_file)
    if image.shape[:2] != mask.shape:
        raise GeometryError(f"{entry.sample_id}: image {image.shape[:2]} vs mask {mask.shape}")
    if not is_thin(mask):
        warnings.warn(f"{entry.sample_id}: mask is not 1-pixel thin")
    return image, mask


# -- synthetic generator -------------------------------------------------------

@dataclass
class SynthConfig:
    """Procedural nerve/tumor scenes; colours are RGB on the [0, 1] scale."""

    count: int = 50
    extent: int = 512
    nerves_per_image: tuple[int, int] = (1, 4)
    contact_fraction: tuple[float, float] = (0.2, 0.7)
    distractors: tuple[int, int] = (0, 1)
    seed: int = 0
    split: str = "train"
    background_rgb: tuple[float, float, float] = (0.86, 0.56, 0.72)
    nerve_rgb: tuple[float, float, float] = (0.95, 0.82, 0.84)
    tumor_rgb: tuple[float, float, float] = (0.58, 0.34, 0.66)
    nucleus_rgb: tuple[float, float, float] = (0.30, 0.14, 0.45)
    noise: float = 0.035
    texture: float = 0.05

    def __post_init__(self):
        self.nerves_per_image = tuple(self.nerves_per_image)
        self.contact_fraction = tuple(self.contact_fraction)
        self.distractors = tuple(self.distractors)
        if self.extent % 32:
            raise ConfigError(f"extent must be divisible by 32, got {self.extent}")
        for name in ("nerves_per_image", "contact_fraction", "distractors"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: range ({lo}, {hi}) is not ordered")
        if self.nerves_per_image[0] < 1:
            raise ConfigError("at least one nerve per image is required")
        if not 0.0 <= self.contact_fraction[0] <= self.contact_fraction[1] <= 1.0:
            raise ConfigError("contact_fraction must lie in [0, 1]")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")


def _closed_chain(cy: float, cx: float, radius_fn, n_steps: int) -> np.ndarray:
    """Minimal closed 8-connected pixel chain tracing a polar curve."""
    theta = np.linspace(0.0, 2 * math.pi, n_steps, endpoint=False)
    r = radius_fn(theta)
    pts = np.stack([np.rint(cy - r * np.sin(theta)), np.rint(cx + r * np.cos(theta))], axis=1).astype(int)
    keep = np.any(pts != np.roll(pts, 1, axis=0), axis=1)
    chain = [tuple(p) for p in pts[keep]]
    # Drop pixels whose neighbours along the chain already touch each other.
    changed = True
    while changed and len(chain) > 4:
        changed = False
        i = 0
        while i < len(chain) and len(chain) > 4:
            a, b = chain[i - 1], chain[(i + 1) % len(chain)]
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 1:
                del chain[i]
                changed = True
            else:
                i += 1
    return np.array(chain, dtype=int)


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _render_one(cfg: SynthConfig, rng: np.random.Generator):
    n = cfg.extent
    shape = (n, n)
    occupied = np.zeros(shape, dtype=bool)
    nerve = np.zeros(shape, dtype=bool)
    tumor = np.zeros(shape, dtype=bool)
    gt = np.zeros(shape, dtype=bool)
    perimeter = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n]

    want = int(rng.integers(cfg.nerves_per_image[0], cfg.nerves_per_image[1] + 1))
    placed = 0
    for _ in range(60 * want):
        if placed == want:
            break
        radius = rng.uniform(0.06, 0.12) * n
        width = rng.uniform(0.35, 0.6) * radius
        margin = radius * 1.3 + width + 2
        if 2 * margin >= n:
            continue
        cy, cx = rng.uniform(margin, n - margin, size=2)
        reach = (yy - cy) ** 2 + (xx - cx) ** 2 <= (radius * 1.3 + width + 4) ** 2
        if (reach & occupied).any():
            continue
        amps = rng.uniform(0.0, 0.07, size=3)
        phases = rng.uniform(0, 2 * math.pi, size=3)

        def radius_fn(t, radius=radius, amps=amps, phases=phases):
            wobble = sum(a * np.cos((k + 2) * t + p) for k, (a, p) in enumerate(zip(amps, phases)))
            return radius * (1.0 + wobble)

        chain = _closed_chain(cy, cx, radius_fn, int(8 * 2 * math.pi * radius * 1.3) + 16)
        ring = np.zeros(shape, dtype=bool)
        ring[chain[:, 0], chain[:, 1]] = True
        if not is_thin(ring):
            continue
        body = ndimage.binary_fill_holes(ring)
        frac = rng.uniform(*cfg.contact_fraction)
        n_arc = int(round(frac * len(chain)))
        arc = np.zeros(shape, dtype=bool)
        if n_arc > 0:
            start = int(rng.integers(len(chain)))
            idx = (start + np.arange(min(n_arc, len(chain) - 1))) % len(chain)
            arc[chain[idx, 0], chain[idx, 1]] = True
            d_arc = ndimage.distance_transform_edt(~arc)
            d_rest = ndimage.distance_transform_edt(~(ring & ~arc))
            lump = width * (1.0 + 0.25 * _smooth_field(rng, shape, 6.0))
            tumor |= (d_arc <= lump) & (d_arc < d_rest) & ~body
        nerve |= body
        perimeter |= ring
        gt |= arc
        occupied |= reach
        placed += 1

    n_free = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(30 * max(n_free, 1)):
        if n_free == 0:
            break
        ry, rx = rng.uniform(0.03, 0.07, size=2) * n
        cy, cx = rng.uniform(0.1 * n, 0.9 * n, size=2)
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0 + 0.2 * _smooth_field(rng, shape, 4.0)
        if (ndimage.binary_dilation(blob, iterations=6) & (occupied | tumor)).any():
            continue
        tumor |= blob
        n_free -= 1

    if not (gt <= perimeter).all():
        raise AssertionError("contact arcs left the nerve perimeter")

    img = np.empty(shape + (3,), dtype=np.float64)
    img[:] = cfg.background_rgb
    img += cfg.texture * _smooth_field(rng, shape, 5.0)[..., None] * np.array([1.0, 1.2, 0.8])
    fibres = np.sin((yy * math.cos(rng.uniform(0, math.pi)) + xx) * 0.6 + 2.0 * _smooth_field(rng, shape, 8.0))
    img[nerve] = cfg.nerve_rgb
    img[nerve] += (cfg.texture * fibres[nerve])[:, None]
    img[tumor] = cfg.tumor_rgb
    seeds = tumor & (rng.random(shape) < 0.06)
    nuclei = ndimage.binary_dilation(seeds, iterations=1) & tumor
    img[nuclei] = cfg.nucleus_rgb
    img = ndimage.gaussian_filter(img, (0.7, 0.7, 0), mode="mirror")
    img += cfg.noise * rng.standard_normal(img.shape)
    return quantize_u8(img), gt


def generate_synthetic(cfg: SynthConfig, out_dir) -> SampleManifest:
    """Render ``cfg.count`` image/mask pairs under ``out_dir`` and write the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    entries = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        image, gt = _render_one(cfg, rng)
        sid = f"synth-{cfg.seed}-{cfg.split}-{i:04d}"
        write_image(out / "images" / f"{sid}.png", image)
        write_mask(out / "masks" / f"{sid}.png", gt)
        entries.append(SampleEntry(sid, f"images/{sid}.png", f"masks/{sid}.png", "synthetic", cfg.split, root=out))
    manifest = SampleManifest(out, entries)
    save_manifest(manifest)
    return manifest
