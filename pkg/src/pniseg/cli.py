"""Command-line entry point: ``pniseg synth | tile | train | infer | eval``.

Exit codes: 0 success, 1 validation/config error, 2 runtime/numeric error,
3 I/O error. Failures print one ``error: code=<n> kind=<type> message=<text>``
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .config import ExperimentConfig, describe_fields, load_config, replace_many, save_config
from .data import generate_synthetic, load_manifest, load_pair, read_image, read_mask, write_image, write_mask
from .errors import ConfigError, DataError, GeometryError, NumericError
from .inference import ablation_run, format_ablation, predict_image, write_prediction
from .metrics import BoundaryScore, boundary_f1, write_report
from .morphology import dilate, disk
from .raster import Rect, crop
from .tiling import plan_tiles
from .training import kfold_split, load_bundle, save_bundle, train_all

log = logging.getLogger("pniseg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
ENV_OUTPUT_DIR = "PNISEG_OUTPUT_DIR"
ENV_THREADS = "PNISEG_THREADS"


class MissingItems(ConfigError):
    pass


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, GeometryError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_RUNTIME
    if isinstance(exc, (DataError, OSError)):
        return EXIT_IO
    return EXIT_RUNTIME


# -- configuration plumbing --------------------------------------------------

# flag dest -> dotted config field
OVERRIDES = {
    "count": "data.synth.count", "extent": "data.synth.extent", "synth_seed": "data.synth.seed",
    "split": "data.synth.split", "contact_fraction": "data.synth.contact_fraction",
    "nerves": "data.synth.nerves_per_image",
    "encoder": "model.encoder", "pyramid_channels": "model.pyramid_channels",
    "head_channels": "model.head_channels", "encoder_width": "model.encoder_width",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "lr_max": "train.lr_max",
    "lr_base": "train.lr_base", "cycle_epochs": "train.cycle_epochs", "train_seed": "train.seed",
    "folds": "train.k", "train_tile": "train.tile", "radius": "train.dilation_radius",
    "oversample_positive": "train.oversample_positive",
    "tile": "infer.tile", "stride": "infer.stride", "threshold": "infer.threshold",
    "tau": "eval.tau", "seed": "seed",
}


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if os.environ.get(ENV_OUTPUT_DIR):
        updates["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    for dest, dotted in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            updates[dotted] = tuple(value) if isinstance(value, list) else value
    for flag, dotted in (("no_augment", "augment.enabled"), ("no_overlap", "infer.use_overlap"),
                         ("no_tta", "infer.use_tta")):
        if getattr(args, flag, False):
            updates[dotted] = False
    return replace_many(cfg, updates)


def _setup_runtime(args) -> None:
    threads = args.threads or (int(os.environ[ENV_THREADS]) if os.environ.get(ENV_THREADS) else None)
    if args.deterministic:
        threads = 1
        torch.use_deterministic_algorithms(True)
    if threads:
        torch.set_num_threads(threads)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        force=True)


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or Path(cfg.output_dir) / "synth")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out} ({exc.strerror or exc})") from exc
    manifest = generate_synthetic(cfg.data.synth, out)
    summary = manifest.summary()
    print(f"synth: wrote {summary['total']} samples to {out} "
          + " ".join(f"{k}={v}" for k, v in summary.items() if k != "total"))
    return EXIT_OK


def cmd_tile(cfg: ExperimentConfig, args) -> int:
    """Write the non-overlapping training tiles and their thickened masks."""
    manifest = load_manifest(args.manifest or cfg.data.manifest)
    out = Path(args.out or Path(cfg.output_dir) / "tiles")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    tile, se = cfg.train.tile, disk(cfg.train.dilation_radius)
    n = 0
    for entry in manifest:
        image, mask = load_pair(entry)
        thick = dilate(mask, se)
        h, w = mask.shape
        for y, x in plan_tiles(max(h, tile), max(w, tile), tile, tile):
            region = Rect(y, x, tile, tile)
            name = f"{entry.sample_id}_{y}_{x}.png"
            write_image(out / "images" / name, crop(image, region, "reflect"))
            write_mask(out / "masks" / name, crop(thick, region, "zero"))
            n += 1
    print(f"tile: wrote {n} tiles of {tile}x{tile} from {len(manifest)} samples to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    path = args.manifest or cfg.data.manifest
    if not path:
        raise ConfigError("train needs --manifest (or data.manifest in the config)")
    manifest = load_manifest(path)
    if len(manifest) == 0:
        raise ConfigError(f"{path}: manifest has no samples")
    out = Path(args.out or Path(cfg.output_dir) / "bundle")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "experiment.yaml")
    folds = kfold_split(manifest.ids(), cfg.train.k, cfg.seed)
    t0 = time.perf_counter()
    bundle = train_all(manifest, folds, cfg.train, cfg.model, cfg.augment, out_dir=out)
    for ckpt in bundle.checkpoints:
        m = ckpt.meta
        print(f"train: fold {m['fold']} best_epoch={m['best_epoch']} best_f1={m['best_f1']:.4f} steps={m['steps']}")
    print(f"train: bundle of {len(bundle)} models written to {out} "
          f"(config {cfg.digest()}, bundle {bundle.digest()}, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _infer_inputs(args, cfg):
    if args.image:
        path = Path(args.image)
        return [(path.stem, path)]
    path = args.manifest or cfg.data.manifest
    if not path:
        raise ConfigError("infer needs --image or --manifest")
    return [(e.sample_id, e.image_file) for e in load_manifest(path)]


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    if not args.bundle:
        raise ConfigError("infer needs --bundle")
    bundle = load_bundle(args.bundle)
    if bundle.partial:
        log.warning("bundle %s is partial (%d models)", args.bundle, len(bundle))
    out = Path(args.out or Path(cfg.output_dir) / "predictions")
    bundle_hash = bundle.digest()
    failures = 0
    for sample_id, image_path in _infer_inputs(args, cfg):
        try:
            image = read_image(image_path)
            result = predict_image(bundle, image, cfg.infer, bundle_hash)
            result.provenance["experiment_hash"] = cfg.digest()
            write_prediction(out, sample_id, image, result)
            log.info("%s: %d tiles predicted", sample_id, result.provenance["tiles"])
            print(f"infer: {sample_id} tiles={result.provenance['tiles']} boundary_px={int(result.boundary.sum())}")
        except Exception as exc:
            if not args.keep_going:
                raise
            failures += 1
            print(f"infer: {sample_id} failed: {exc}", file=sys.stderr)
    if failures:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    path = args.manifest or cfg.data.manifest
    if not path:
        raise ConfigError("eval needs --manifest with ground-truth masks")
    manifest = load_manifest(path)
    out = Path(args.out or Path(cfg.output_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    tau = cfg.eval.tau
    if args.ablation:
        if not (args.aug_bundle and args.noaug_bundle):
            raise ConfigError("--ablation needs --aug-bundle and --noaug-bundle")
        bundles = {"aug": load_bundle(args.aug_bundle), "noaug": load_bundle(args.noaug_bundle)}
        pairs = [load_pair(e) for e in manifest]
        rows = ablation_run(bundles, pairs, cfg.infer, tau)
        table = format_ablation(rows)
        print(table)
        (out / "ablation.txt").write_text(table + "\n")
        (out / "ablation.json").write_text(json.dumps(
            {"tolerance": tau, "config_hash": cfg.digest(),
             "rows": [{"label": r.label, "variant": r.variant, "overlap": r.use_overlap, "tta": r.use_tta,
                       **r.score.as_row()} for r in rows]}, indent=2, sort_keys=True))
        return EXIT_OK
    if not args.pred_dir:
        raise ConfigError("eval needs --pred-dir (or --ablation)")
    pred_dir = Path(args.pred_dir)
    rows, missing = {}, []
    for entry in manifest:
        pred_file = pred_dir / f"{entry.sample_id}_boundary.png"
        if not pred_file.is_file():
            missing.append(entry.sample_id)
            continue
        _, gt = load_pair(entry)
        rows[entry.sample_id] = boundary_f1(read_mask(pred_file), gt, tau)
    if missing:
        print("eval: missing predictions for " + ", ".join(missing), file=sys.stderr)
        if not args.allow_missing:
            raise MissingItems(f"{len(missing)} ground-truth samples have no prediction")
    if not rows:
        raise ConfigError("no matched prediction/ground-truth pairs")
    summary = sum(rows.values(), start=BoundaryScore(0, 0, 0, 0, tau))
    write_report(out / "report", rows, summary)
    print(f"{'image_id':<32} {'precision':>9} {'recall':>9} {'f1':>9} {'n_pred':>7} {'n_gt':>7}  tau")
    for sid, s in sorted(rows.items()):
        print(f"{sid:<32} {s.precision:9.4f} {s.recall:9.4f} {s.f1:9.4f} {s.n_pred:7d} {s.n_gt:7d}  {tau}")
    print(f"{'dataset':<32} {summary.precision:9.4f} {summary.recall:9.4f} {summary.f1:9.4f} "
          f"{summary.n_pred:7d} {summary.n_gt:7d}  {tau}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "tile": cmd_tile, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration fields (file values; flags win):\n  " + "\n  ".join(describe_fields())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config file")
    common.add_argument("--threads", type=int, help=f"cap worker threads (env {ENV_THREADS})")
    common.add_argument("--deterministic", action="store_true", help="force serial, deterministic kernels")
    common.add_argument("--log-level", default="warning")
    common.add_argument("--seed", type=int, help="fold-split seed (seed)")
    common.add_argument("--out", help=f"output location (default under output_dir, env {ENV_OUTPUT_DIR})")

    parser = argparse.ArgumentParser(prog="pniseg", description=__doc__.splitlines()[0], epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--count", type=int, help="number of images (data.synth.count, default 50)")
    p.add_argument("--extent", type=int, help="image side in pixels (data.synth.extent, default 512)")
    p.add_argument("--synth-seed", type=int, dest="synth_seed", help="generator seed (data.synth.seed)")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--contact-fraction", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--nerves", type=int, nargs=2, metavar=("LO", "HI"))

    p = sub.add_parser("tile", parents=[common], help="export non-overlapping training tiles", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--manifest")
    p.add_argument("--train-tile", type=int, dest="train_tile", help="tile side (train.tile, default 512)")
    p.add_argument("--radius", type=int, help="mask dilation radius (train.dilation_radius, default 3)")

    p = sub.add_parser("train", parents=[common], help="train the k-fold FPN ensemble", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--manifest")
    p.add_argument("--no-augment", action="store_true", help="disable training augmentation")
    p.add_argument("--epochs", type=int, help="train.epochs (default 60)")
    p.add_argument("--batch-size", type=int, help="train.batch_size (default 8)")
    p.add_argument("--lr-max", type=float, help="train.lr_max (default 1e-4)")
    p.add_argument("--lr-base", type=float, help="train.lr_base (default 1e-5)")
    p.add_argument("--cycle-epochs", type=int, help="train.cycle_epochs (default 8)")
    p.add_argument("--train-seed", type=int, dest="train_seed", help="train.seed (fold i uses seed + i)")
    p.add_argument("--folds", type=int, help="train.k (default 4)")
    p.add_argument("--train-tile", type=int, dest="train_tile", help="train.tile (default 512)")
    p.add_argument("--radius", type=int, help="train.dilation_radius (default 3)")
    p.add_argument("--oversample-positive", action="store_const", const=True, default=None)
    p.add_argument("--encoder", choices=("tiny", "effnet_b0_like"))
    p.add_argument("--pyramid-channels", type=int)
    p.add_argument("--head-channels", type=int)
    p.add_argument("--encoder-width", type=float)

    p = sub.add_parser("infer", parents=[common], help="predict boundaries for images", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--bundle")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--tile", type=int, help="infer.tile (default 512)")
    p.add_argument("--stride", type=int, help="infer.stride (default 256)")
    p.add_argument("--threshold", type=float, help="infer.threshold (default 0.5)")
    p.add_argument("--no-overlap", action="store_true", help="stride = tile")
    p.add_argument("--no-tta", action="store_true", help="identity transform only")
    p.add_argument("--keep-going", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="boundary F1 of predictions or the ablation table",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--manifest", help="ground-truth manifest")
    p.add_argument("--pred-dir")
    p.add_argument("--tau", type=int, help="match tolerance in pixels (eval.tau, default 3)")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--ablation", action="store_true", help="run the four-row pipeline ablation")
    p.add_argument("--aug-bundle")
    p.add_argument("--noaug-bundle")
    p.add_argument("--tile", type=int, help="infer.tile (default 512)")
    p.add_argument("--stride", type=int, help="infer.stride (default 256)")
    p.add_argument("--threshold", type=float, help="infer.threshold (default 0.5)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_runtime(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        code = _exit_code(exc)
        msg = str(exc).replace("\n", " ")
        print(f"error: code={code} kind={type(exc).__name__} message={msg}", file=sys.stderr)
        if code == EXIT_RUNTIME and not isinstance(exc, NumericError):
            log.debug("unexpected failure", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
