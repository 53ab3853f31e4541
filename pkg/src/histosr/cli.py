"""Command-line entry point: ``histosr <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

from . import data, trainer, unet
from .errors import ConfigError, DataError, NumericalError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "synth": {"count": 1, "width": 1524, "height": 1024, "seed": 0, "out_dir": None},
    "degrade": {"input": None, "output": None, "factor": 2},
    "build-dataset": {
        "src_dir": None, "count": 1320, "patch": 512, "factor": 2,
        "train": 1000, "test": 320, "seed": 0, "out_dir": None,
    },
    "train": {
        "manifest": None, "levels": 4, "base_channels": 16, "lr": 0.001, "batch": 2,
        "epochs": 900, "patience": 100, "min_delta": 0.0, "seed": 0, "out": None,
        "metrics": None, "eval_every": 10, "checkpoint_every": 50, "no_timing": False,
    },
    "predict": {"weights": None, "input": None, "out_residual": None, "out_reconstructed": None},
    "evaluate": {"weights": None, "manifest": None, "split": "test", "out_csv": None},
    "profile": {
        "image_a": None, "image_b": None, "x0": None, "y0": None, "x1": None, "y1": None, "out_csv": None,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file of flag values; explicit flags win")
    common.add_argument("--verbose", action="store_true", help="print the resolved configuration")

    parser = _Parser(prog="histosr", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], allow_abbrev=False)

    p = add("synth", "write synthetic H&E-like source images")
    p.add_argument("--count", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out-dir")

    p = add("degrade", "cubic down/up-sample one image")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--factor", type=int)

    p = add("build-dataset", "augment sources into paired lr/hr/residual patches")
    p.add_argument("--src-dir")
    p.add_argument("--count", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--factor", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--out-dir")

    p = add("train", "train the U-Net on a dataset manifest")
    p.add_argument("--manifest")
    p.add_argument("--levels", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--out", help="weights file to write")
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-timing", action="store_const", const=True,
                   help="leave the seconds column empty so the log is reproducible")

    p = add("predict", "predict the residual and reconstruction for one image")
    p.add_argument("--weights")
    p.add_argument("--input")
    p.add_argument("--out-residual")
    p.add_argument("--out-reconstructed")

    p = add("evaluate", "relative MSE of a trained model on a manifest split")
    p.add_argument("--weights")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--out-csv")

    p = add("profile", "red-channel intensities along a segment of two images")
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    for name in ("--x0", "--y0", "--x1", "--y1"):
        p.add_argument(name, type=int)
    p.add_argument("--out-csv")
    return parser


def resolve(args):
    """Merge built-in defaults < config file < explicit flags."""
    defaults = DEFAULTS[args.command]
    resolved = dict(defaults)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown keys in config file for {args.command}: {', '.join(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    missing = [k for k, v in resolved.items() if v is None and k not in ("metrics", "out_csv")]
    if missing:
        raise ConfigError(f"{args.command}: missing required option(s): "
                          + ", ".join("--" + k.replace("_", "-") for k in missing))
    return resolved


# -- subcommands ----------------------------------------------------------------------


def cmd_synth(cfg):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    images = data.synth_generate(cfg["count"], cfg["width"], cfg["height"], cfg["seed"])
    paths = []
    for i, img in enumerate(images):
        path = os.path.join(cfg["out_dir"], f"synth_{i:04d}.png")
        data.write_png(path, img)
        paths.append(path)
    print(f"wrote {len(paths)} images to {cfg['out_dir']}")


def cmd_degrade(cfg):
    img = data.read_png(cfg["input"])
    data.write_png(cfg["output"], data.degrade(img, cfg["factor"]))
    print(f"wrote {cfg['output']}")


def cmd_build_dataset(cfg):
    paths = sorted(glob.glob(os.path.join(cfg["src_dir"], "*.png")))
    if not paths:
        raise DataError(f"no PNG files found in {cfg['src_dir']}")
    sources = [data.read_png(p) for p in paths]
    manifest = data.build_dataset(
        sources, cfg["out_dir"], cfg["count"], cfg["patch"], cfg["factor"],
        cfg["train"], cfg["test"], cfg["seed"],
    )
    print(f"wrote {manifest} ({cfg['train']} train / {cfg['test']} test, audit passed)")


def cmd_train(cfg):
    manifest = data.DatasetManifest.load(cfg["manifest"])
    model_cfg = unet.UNetConfig(
        levels=cfg["levels"], base_channels=cfg["base_channels"], input_size=(manifest.patch, manifest.patch),
    )
    train_cfg = trainer.TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"],
        patience=min(cfg["patience"], cfg["epochs"]), min_delta=cfg["min_delta"], seed=cfg["seed"],
        eval_every=cfg["eval_every"], checkpoint_every=cfg["checkpoint_every"], record_time=not cfg["no_timing"],
    )
    weights = unet.build(model_cfg, cfg["seed"])
    metrics_path = cfg["metrics"] or os.path.splitext(cfg["out"])[0] + ".metrics.csv"
    for path in (cfg["out"], metrics_path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with trainer.MetricsLog(metrics_path) as sink:
        result = trainer.train(train_cfg, weights, manifest, metrics=sink, checkpoint=cfg["out"])
    unet.save_weights(result.weights, cfg["out"])
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}, final loss {last.loss:.6f}")
    print(f"wrote {cfg['out']} and {metrics_path}")


def cmd_predict(cfg):
    weights = unet.load_weights(cfg["weights"])
    img = data.read_png(cfg["input"])
    residual = unet.predict_residual(weights, img)
    data.write_png(cfg["out_residual"], residual)
    data.write_png(cfg["out_reconstructed"], data.decode_residual(img, residual))
    print(f"wrote {cfg['out_residual']} and {cfg['out_reconstructed']}")


def cmd_evaluate(cfg):
    weights = unet.load_weights(cfg["weights"])
    manifest = data.DatasetManifest.load(cfg["manifest"])
    report = trainer.evaluate_rmse(weights, data.load_split(manifest, cfg["split"]))
    paper = {"train": trainer.PAPER_RMSE_TRAIN, "test": trainer.PAPER_RMSE_TEST}.get(cfg["split"])
    print(f"split: {cfg['split']} ({report.count} images)")
    print(f"rmse_reconstruction: {report.reconstruction!r}")
    print(f"rmse_residual: {report.residual!r}")
    print(f"rmse_baseline: {report.baseline!r}")
    if paper is not None:
        print(f"paper-reported rmse ({cfg['split']}, original dataset): {paper}")
    if cfg["out_csv"]:
        with open(cfg["out_csv"], "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["split", "count", "rmse_reconstruction", "rmse_residual", "rmse_baseline", "paper_reported"])
            w.writerow([cfg["split"], report.count, repr(report.reconstruction), repr(report.residual),
                        repr(report.baseline), "" if paper is None else paper])


def bresenham(x0, y0, x1, y1):
    """Integer points of the segment from (x0, y0) to (x1, y1), endpoints included."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    points = []
    x, y = x0, y0
    while True:
        points.append((x, y))
        if x == x1 and y == y1:
            return points
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def cmd_profile(cfg):
    a, b = data.read_png(cfg["image_a"]), data.read_png(cfg["image_b"])
    if a.shape != b.shape:
        raise ConfigError(f"images differ in size: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    h, w = a.shape[:2]
    for x, y in ((cfg["x0"], cfg["y0"]), (cfg["x1"], cfg["y1"])):
        if not (0 <= x < w and 0 <= y < h):
            raise ConfigError(f"endpoint ({x}, {y}) lies outside the {w}x{h} images")
    points = bresenham(cfg["x0"], cfg["y0"], cfg["x1"], cfg["y1"])
    with open(cfg["out_csv"], "w", newline="", encoding="utf-8") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["index", "x", "y", "red_a", "red_b"])
        for i, (x, y) in enumerate(points):
            out.writerow([i, x, y, int(a[y, x, 0]), int(b[y, x, 0])])
    print(f"wrote {len(points)} samples to {cfg['out_csv']}")


COMMANDS = {
    "synth": cmd_synth,
    "degrade": cmd_degrade,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "profile": cmd_profile,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.verbose:
            print(json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True), file=sys.stderr)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
