"""K-fold splitting, the cyclical LR schedule and the fold training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_pair
from .data import SampleManifest, load_pair
from .errors import ConfigError, DataError, NumericError
from .inference import InferenceConfig, predict_image
from .metrics import DEFAULT_TOLERANCE, dataset_f1
from .model import Checkpoint, FpnConfig, bce_dice_loss, build_model, init_params, load_checkpoint, save_checkpoint
from .morphology import dilate, disk
from .raster import Rect, crop, to_float
from .tiling import plan_tiles

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_base: float = 1e-5
    cycle_epochs: int = 8
    seed: int = 0
    fold: int = 0
    k: int = 4
    tile: int = 512
    dilation_radius: int = 3
    eval_tolerance: int = DEFAULT_TOLERANCE
    eval_threshold: float = 0.5
    oversample_positive: bool = False

    def __post_init__(self):
        if not self.lr_base < self.lr_max:
            raise ConfigError(f"lr_base ({self.lr_base}) must be below lr_max ({self.lr_max})")
        if self.epochs < 1 or self.batch_size < 1 or self.cycle_epochs < 1:
            raise ConfigError("epochs, batch_size and cycle_epochs must be >= 1")
        if self.k < 2:
            raise ConfigError(f"k-fold training needs k >= 2, got {self.k}")
        if self.tile % 32:
            raise ConfigError(f"training tile {self.tile} is not divisible by 32")


@dataclass
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def outside(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.members(f)) for f in range(self.k)]


def kfold_split(sample_ids, k: int = 4, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment."""
    ids = sorted(sample_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(ids) < k:
        raise ConfigError(f"cannot split {len(ids)} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldAssignment(k, {ids[j]: pos % k for pos, j in enumerate(order)})


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Triangular cyclical learning rate: base -> max -> base every cycle."""
    if steps_per_epoch < 1:
        raise ConfigError("steps_per_epoch must be >= 1")
    half = cfg.cycle_epochs / 2 * steps_per_epoch
    pos = (step / half) % 2.0
    frac = pos if pos <= 1.0 else 2.0 - pos
    return (1.0 - frac) * cfg.lr_base + frac * cfg.lr_max


def steps_per_epoch(n_tiles: int, batch_size: int) -> int:
    return math.ceil(n_tiles / batch_size)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def extract_training_tiles(entries, tile: int, radius: int):
    """Non-overlapping tiles of each image with its disk-dilated mask.

    Masks are thickened on the full image before cropping so lines just
    outside a tile still reach into it.
    """
    se = disk(radius)
    images, masks = [], []
    for entry in entries:
        image, mask = load_pair(entry)
        thick = dilate(mask, se)
        h, w = mask.shape
        ph, pw = max(h, tile), max(w, tile)
        for y, x in plan_tiles(ph, pw, tile, tile):
            region = Rect(y, x, tile, tile)
            images.append(to_float(crop(image, region, pad="reflect")))
            masks.append(crop(thick, region, pad="zero"))
    return images, masks


@dataclass
class TrainingLog:
    path: Path | None = None
    records: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


class TrainingAborted(NumericError):
    """Training hit a non-finite loss; ``checkpoint`` is the last good state."""

    def __init__(self, msg: str, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


class NetPredictor:
    """Eval-mode wrapper turning a network into an inference predictor."""

    def __init__(self, net: torch.nn.Module):
        self.net = net

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        self.net.eval()
        x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2)
        with torch.no_grad():
            return self.net(x.contiguous())[:, 0].numpy()


def evaluate(predictors, entries, cfg: InferenceConfig, tau: int = DEFAULT_TOLERANCE):
    pairs = []
    for entry in entries:
        image, gt = load_pair(entry)
        pairs.append((predict_image(predictors, image, cfg).boundary, gt))
    return dataset_f1(pairs, tau)


def _eval_config(cfg: TrainConfig) -> InferenceConfig:
    return InferenceConfig(tile=cfg.tile, stride=cfg.tile, threshold=cfg.eval_threshold,
                           use_overlap=False, use_tta=False)


def train_fold(manifest: SampleManifest, folds: FoldAssignment, fold: int, cfg: TrainConfig,
               model_cfg: FpnConfig, aug_cfg: AugmentConfig | None = None, log_path=None) -> Checkpoint:
    """Train on every fold but ``fold`` and keep the epoch with the best held-out F1."""
    aug_cfg = aug_cfg or AugmentConfig()
    if not 0 <= fold < folds.k:
        raise ConfigError(f"fold {fold} out of range for k={folds.k}")
    by_id = manifest.by_id()
    train_ids, eval_ids = folds.outside(fold), folds.members(fold)
    if not train_ids or not all(i in by_id for i in train_ids):
        raise ConfigError(f"fold {fold}: empty or unknown training split")
    fold_seed = cfg.seed + fold
    torch.manual_seed(fold_seed)
    images, masks = extract_training_tiles([by_id[i] for i in train_ids], cfg.tile, cfg.dilation_radius)
    if cfg.oversample_positive:
        pos = [i for i, m in enumerate(masks) if m.any()]
        images += [images[i] for i in pos]
        masks += [masks[i] for i in pos]
    n = len(images)
    spe = steps_per_epoch(n, cfg.batch_size)
    eval_entries = [by_id[i] for i in eval_ids]
    eval_cfg = _eval_config(cfg)

    net = build_model(model_cfg, init_params(model_cfg, fold_seed))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_base)
    tlog = TrainingLog(log_path)
    meta_base = {
        "fold": fold, "train_cfg": asdict(cfg), "augment_cfg": asdict(aug_cfg),
        "train_ids": train_ids, "eval_ids": eval_ids, "tiles": n, "steps_per_epoch": spe,
    }
    best_state = copy.deepcopy(net.state_dict())
    best = {"best_epoch": -1, "best_f1": -1.0}
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        net.train()
        order = np.random.default_rng(_derive_seed(fold_seed, epoch)).permutation(n)
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                x, y = augment_pair(images[i], masks[i], aug_cfg, _derive_seed(fold_seed, epoch, int(i)))
                xs.append(x)
                ys.append(y)
            xb = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2).contiguous()
            yb = torch.from_numpy(np.stack(ys).astype(np.float32))[:, None]
            lr = lr_at(step, spe, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                loss = bce_dice_loss(net(xb), yb)
                if not torch.isfinite(loss.total):
                    raise NumericError(f"non-finite loss at step {step}")
            except NumericError as exc:
                last_good = Checkpoint(best_state, model_cfg, {**meta_base, **best, "aborted_at_step": step})
                raise TrainingAborted(f"fold {fold}: {exc}", last_good) from exc
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            tlog.write(type="step", step=step, epoch=epoch, lr=lr, bce=float(loss.bce.detach()),
                       dice=float(loss.dice.detach()), total=float(loss.total.detach()))
            step += 1
        score = evaluate([NetPredictor(net)], eval_entries, eval_cfg, cfg.eval_tolerance)
        history.append(score.f1)
        tlog.write(type="epoch", epoch=epoch, held_out_f1=score.f1,
                   precision=score.precision, recall=score.recall)
        log.info("fold %d epoch %d: held-out F1 %.4f", fold, epoch, score.f1)
        if score.f1 > best["best_f1"]:
            best = {"best_epoch": epoch, "best_f1": score.f1}
            best_state = copy.deepcopy(net.state_dict())
    meta = {**meta_base, **best, "epoch_f1": history, "steps": step}
    return Checkpoint(best_state, model_cfg, meta)


@dataclass
class ModelBundle:
    checkpoints: list[Checkpoint]
    partial: bool = False
    _nets: list | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        cfgs = {c.model_cfg.digest() for c in self.checkpoints}
        if len(cfgs) > 1:
            raise ConfigError("all checkpoints in a bundle must share one model config")

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def model_cfg(self) -> FpnConfig:
        return self.checkpoints[0].model_cfg

    def predictors(self) -> list[NetPredictor]:
        if self._nets is None:
            self._nets = [NetPredictor(c.build()) for c in self.checkpoints]
        return self._nets

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in self.checkpoints:
            for name, t in c.params.items():
                h.update(name.encode())
                h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


BUNDLE_INDEX = "bundle.json"


def save_bundle(bundle: ModelBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = []
    for i, ckpt in enumerate(bundle.checkpoints):
        name = f"fold{ckpt.meta.get('fold', i)}.ckpt"
        save_checkpoint(out / name, ckpt)
        folds.append({"file": name, "fold": ckpt.meta.get("fold", i),
                      "best_epoch": ckpt.meta.get("best_epoch"), "best_f1": ckpt.meta.get("best_f1"),
                      "sha256": hashlib.sha256((out / name).read_bytes()).hexdigest()})
    index = {
        "k": len(bundle.checkpoints), "partial": bundle.partial,
        "config_hash": bundle.model_cfg.digest() if bundle.checkpoints else None,
        "bundle_hash": bundle.digest(), "folds": folds,
    }
    path = out / BUNDLE_INDEX
    path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return path


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    index_path = path / BUNDLE_INDEX if path.is_dir() else path
    if not index_path.is_file():
        raise FileNotFoundError(f"bundle index not found: {index_path}")
    index = json.loads(index_path.read_text())
    ckpts = []
    for f in index["folds"]:
        file = index_path.parent / f["file"]
        if hashlib.sha256(file.read_bytes()).hexdigest() != f["sha256"]:
            raise DataError(f"{file}: checksum mismatch")
        ckpts.append(load_checkpoint(file))
    return ModelBundle(ckpts, partial=index.get("partial", False))


def train_all(manifest: SampleManifest, folds: FoldAssignment, cfg: TrainConfig, model_cfg: FpnConfig,
              aug_cfg: AugmentConfig | None = None, out_dir=None) -> ModelBundle:
    """Train one model per fold; with ``out_dir`` the bundle and logs are written there.

    On a fold failure the finished folds are saved as a partial bundle before
    the exception propagates (it carries the bundle as ``exc.bundle``).
    """
    if folds.k < 2:
        raise ConfigError("k >= 2 is required to train an ensemble")
    if len(manifest) == 0:
        raise ConfigError("cannot train on an empty manifest")
    ckpts = []
    for fold in range(folds.k):
        log_path = None if out_dir is None else Path(out_dir) / f"fold{fold}.log.jsonl"
        fold_cfg = TrainConfig(**{**asdict(cfg), "fold": fold})
        try:
            ckpts.append(train_fold(manifest, folds, fold, fold_cfg, model_cfg, aug_cfg, log_path))
        except Exception as exc:
            partial = ModelBundle(ckpts, partial=True)
            if out_dir is not None and ckpts:
                save_bundle(partial, out_dir)
            exc.bundle = partial
            raise
    bundle = ModelBundle(ckpts)
    if out_dir is not None:
        save_bundle(bundle, out_dir)
    return bundle
