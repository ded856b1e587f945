"""Command-line entry point: ``hcseg {synth,import,train,eval,predict}``.

Every command that writes output also writes ``manifest.json`` next to it with
the resolved flags, the seed and the package version, which is enough to
rerun it.  Manifests carry no timestamps, so identical runs give identical
files.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    ANNOTATION_SUFFIX,
    DataError,
    SynthSpec,
    augment_all,
    load_hc18,
    read_metadata,
    read_pgm,
    resize_area,
    resize_nearest,
    split,
    synth_generate,
    to_uint8,
    write_dataset,
    write_pgm,
    _find_metadata,
)
from .losses import LossConfig
from .metrics import boundary_mask
from .segnet import VARIANTS, CheckpointError, NetworkConfig, build_network, count_parameters, load_checkpoint, save_checkpoint
from .tensor import HIGH, STANDARD
from .train import THRESHOLD, NumericalError, TrainConfig, predict_masks, predict_proba, train
from .train import evaluate as evaluate_records

logger = logging.getLogger("hcseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- flag parsing helpers ----------------------------------------------------------------------

def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return (h, w)


def _pair(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return (lo, hi)


def _write_manifest(directory: Path, command: str, args: argparse.Namespace, **fields) -> Path:
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k not in ("func", "verbose", "quiet")}
    doc = {"command": command, "version": __version__, "flags": flags}
    doc.update(fields)
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _prepare_output(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"{path}: output directory is not writable ({exc.strerror or exc})") from None
    return path


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise DataError(f"{what} not found: {path}")
    return path


def _loss_config(args) -> LossConfig:
    return LossConfig(omega0=args.omega0, sigma=args.sigma, clamp_eps=args.clamp_eps, smooth_eps=args.smooth_eps, exponent_form=args.weight_form)


# -- commands ----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    spec = SynthSpec(
        count=args.count,
        image_size=args.size,
        semi_axis_range=args.semi_axes,
        speckle=args.speckle,
        texture=args.texture,
        pixel_size_range=args.pixel_size_range,
        margin=args.margin,
        rim_width=args.rim_width,
        seed=args.seed,
    )
    out = _prepare_output(Path(args.out))
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    # the marker goes first so an interrupted run is recognisable
    _write_manifest(out, "synth", args, seed=spec.seed, spec=spec_dict, complete=False)
    records = synth_generate(spec)
    write_dataset(records, out)
    _write_manifest(out, "synth", args, seed=spec.seed, spec=spec_dict, complete=True, records=len(records))
    print(f"wrote {len(records)} phantoms to {out}")
    return EXIT_OK


def _read_raster(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"{path}: reading {path.suffix} files needs Pillow (pip install Pillow)") from None
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr


def cmd_import(args) -> int:
    """Convert an original HC18 folder (PNG images and outlines) to the PGM layout."""
    src = _require_dir(Path(args.src), "source directory")
    meta_path = _find_metadata(src)
    rows = read_metadata(meta_path)
    if not rows:
        raise DataError(f"{meta_path}: no rows")
    out = _prepare_output(Path(args.out))
    _write_manifest(out, "import", args, seed=None, complete=False)
    failed = 0
    for stem, _, _ in rows:
        try:
            for name in (stem, stem + ANNOTATION_SUFFIX):
                matches = sorted(p for p in src.glob(name + ".*") if p.suffix.lower() in (".png", ".pgm", ".bmp", ".tif", ".tiff"))
                if not matches:
                    raise DataError(f"{name}: no image file in {src}")
                arr = _read_raster(matches[0])
                if arr.dtype != np.uint8:
                    arr = to_uint8(arr.astype(np.float64) / float(np.iinfo(arr.dtype).max))
                if name.endswith(ANNOTATION_SUFFIX):
                    arr = (arr > 0).astype(np.uint8) * 255
                write_pgm(out / f"{name}.pgm", arr)
        except (DataError, OSError) as exc:
            failed += 1
            logger.error("%s: %s", stem, exc)
    text = meta_path.read_text()
    (out / meta_path.name).write_text(text)
    _write_manifest(out, "import", args, seed=None, complete=True, records=len(rows) - failed, failed=failed)
    print(f"imported {len(rows) - failed} of {len(rows)} images into {out}")
    return EXIT_OK if failed == 0 else EXIT_DATA


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        loss=_loss_config(args),
        checkpoint_dir=None,
        checkpoint_every=args.checkpoint_every,
    )


def cmd_train(args) -> int:
    net_cfg = NetworkConfig(variant=args.variant, input_size=args.size, base_channels=args.base)
    cfg = _train_config(args)
    dtype = HIGH if args.precision == "double" else STANDARD
    if args.dry_run:
        net = build_network(net_cfg, seed=args.seed, dtype=dtype)
        print(f"{args.variant}: {count_parameters(net)} trainable parameters")
        return EXIT_OK
    if args.data is None:
        raise UsageError("--data is required unless --dry-run is given")
    if args.out is None:
        raise UsageError("--out is required unless --dry-run is given")
    data_dir = _require_dir(Path(args.data), "dataset directory")
    out = _prepare_output(Path(args.out))

    records = load_hc18(data_dir)
    if not records:
        raise DataError(f"{data_dir}: no usable records")
    if args.validate_on_train:
        train_recs = augment_all(records) if args.augment else records
        val_recs = train_recs
    else:
        pool = augment_all(records) if args.augment else records
        train_recs, val_recs = split(pool, args.train_fraction, seed=args.seed)
        if not train_recs:
            raise DataError(f"split left no training images out of {len(records)}")

    net = build_network(net_cfg, seed=args.seed, dtype=dtype)
    n_params = count_parameters(net)
    if cfg.checkpoint_every:
        cfg = replace(cfg, checkpoint_dir=str(out / "checkpoints"))
    manifest = dict(
        seed=args.seed,
        parameters=n_params,
        network=net_cfg.to_dict(),
        train=cfg.to_dict(),
        dtype=np.dtype(dtype).name,
        train_images=[r.id for r in train_recs],
        val_images=[r.id for r in val_recs],
    )
    _write_manifest(out, "train", args, complete=False, **manifest)
    logger.info("training %s (%d parameters) on %d images, validating on %d", args.variant, n_params, len(train_recs), len(val_recs))
    net, history = train(net, train_recs, val_recs, cfg)
    save_checkpoint(out / "model.ckpt", net, extra={"epochs": cfg.epochs})
    history.write_csv(out / "history.csv")
    _write_manifest(out, "train", args, complete=True, **manifest)
    last = history.rows[-1] if history.rows else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.train_loss:.5f}, val soft-dice {last.val_soft_dice:.4f}")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def _load_net(path: Path, variant: Optional[str]):
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    if variant is not None and variant != net.config.variant:
        raise CheckpointError(f"checkpoint {path} holds a {net.config.variant} network but --variant {variant} was requested")
    return net


def _overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Image squeezed into mid-grey range; ground-truth boundary black, predicted boundary white."""
    out = 32 + np.round(np.clip(image, 0, 1) * 191).astype(np.uint8)
    out[boundary_mask(gt)] = 0
    out[boundary_mask(pred)] = 255
    return out


def cmd_eval(args) -> int:
    data_dir = _require_dir(Path(args.data), "dataset directory")
    net = _load_net(Path(args.checkpoint), args.variant)
    out = _prepare_output(Path(args.out))
    records = load_hc18(data_dir)
    if not records:
        raise DataError(f"{data_dir}: no usable records")
    if args.split != "all":
        train_recs, val_recs = split(records, args.train_fraction, seed=args.seed)
        records = train_recs if args.split == "train" else val_recs
        if not records:
            raise DataError(f"the {args.split} partition is empty")
    _write_manifest(out, "eval", args, seed=args.seed, network=net.config.to_dict(), images=[r.id for r in records])
    report = evaluate_records(net, records)
    report.write_csv(out / "report.csv")
    report.write_summary_csv(out / "summary.csv")
    report.write_json(out / "summary.json")
    if args.overlays:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for r, pred in zip(records, predict_masks(net, records)):
            write_pgm(odir / f"{r.id}.pgm", _overlay(r.image, pred, r.mask))
    agg = report.aggregates
    print("  ".join(f"{c} {agg[c]['mean']:.4f}" for c in ("Dice", "DF(mm)", "ADF(mm)", "HD(mm)")))
    if report.failed:
        print(f"{report.failed} of {len(report.rows)} images could not be measured", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _load_net(Path(args.checkpoint), None)
    out = _prepare_output(Path(args.out))
    _write_manifest(out, "predict", args, seed=None, network=net.config.to_dict())
    size = net.config.input_size
    failed = 0
    for name in args.images:
        path = Path(name)
        try:
            raw = _read_raster(path)
        except (DataError, OSError) as exc:
            failed += 1
            print(f"{path}: {exc}", file=sys.stderr)
            continue
        image = raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
        batch = resize_area(image, size)[None, None]
        prob = predict_proba(net, batch)[0, 0]
        mask = resize_nearest(prob > THRESHOLD, image.shape)
        write_pgm(out / f"{path.stem}_mask.pgm", mask.astype(np.uint8) * 255)
        if args.proba:
            write_pgm(out / f"{path.stem}_proba.pgm", to_uint8(resize_area(prob.astype(np.float64), image.shape)))
    print(f"predicted {len(args.images) - failed} of {len(args.images)} images into {out}")
    return EXIT_OK if failed == 0 else EXIT_DATA


# -- parser ------------------------------------------------------------------------------------

def _add_loss_flags(p: argparse.ArgumentParser):
    d = LossConfig()
    g = p.add_argument_group("loss")
    g.add_argument("--omega0", type=float, default=d.omega0, help="boundary weight amplitude")
    g.add_argument("--sigma", type=float, default=d.sigma, help="boundary weight width in pixels")
    g.add_argument("--clamp-eps", type=float, default=d.clamp_eps)
    g.add_argument("--smooth-eps", type=float, default=d.smooth_eps)
    g.add_argument("--weight-form", choices=("gaussian", "literal"), default=d.exponent_form)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcseg", description="Fetal head segmentation and head-circumference measurement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = SynthSpec()
    p = sub.add_parser("synth", help="generate a synthetic dataset in the HC18 layout")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=s.count)
    p.add_argument("--size", type=_size, default=s.image_size, help="HxW")
    p.add_argument("--semi-axes", type=_pair, default=s.semi_axis_range, help="LO,HI in pixels")
    p.add_argument("--speckle", type=float, default=s.speckle)
    p.add_argument("--texture", type=float, default=s.texture)
    p.add_argument("--pixel-size-range", type=_pair, default=s.pixel_size_range, help="LO,HI in mm")
    p.add_argument("--margin", type=int, default=s.margin)
    p.add_argument("--rim-width", type=float, default=s.rim_width)
    p.add_argument("--seed", type=int, default=s.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="convert original HC18 images to PGM")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    t = TrainConfig()
    p = sub.add_parser("train", help="train a network")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--variant", choices=VARIANTS, default="mini-linknet")
    p.add_argument("--base", type=int, default=64, help="channels after the initial convolution")
    p.add_argument("--size", type=_size, default=(256, 384), help="network input HxW")
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--seed", type=int, default=t.seed)
    p.add_argument("--checkpoint-every", type=int, default=t.checkpoint_every)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--augment", action="store_true", help="add the 9 flip/rotation copies of every image")
    p.add_argument("--validate-on-train", action="store_true", help="train on everything and validate on the same images")
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--dry-run", action="store_true", help="build the network, print its parameter count and stop")
    _add_loss_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, help="expected variant; refused if the checkpoint differs")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0, help="split seed (matches the training run)")
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment individual images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proba", action="store_true", help="also write the probability map")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=logging.ERROR if args.quiet else level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hcseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"hcseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"hcseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"hcseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
