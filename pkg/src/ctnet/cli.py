"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as dp
from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError
from .interpret import activation_grid, grad_cam, overlay_png
from .metrics import write_confusion_csv
from .network import CLASS_NAMES, build_network, reference_spec
from .optim import lr_range_test
from .tensor import SeededRng
from .train import RunConfig, Trainer, evaluate, read_config_file

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _network_input(net, path):
    """Load an image at the network's input size, scaled the way the network expects."""
    c, h, _ = net.spec.input_shape
    raw = net.layers[0].kind == "rescale"
    return dp.load_image(path, h, c, rescale=not raw)


# --- commands -----------------------------------------------------------------


def cmd_preprocess(args) -> int:
    records, rejects = dp.parse_metadata(args.metadata)
    images = Path(args.images)
    if not images.is_dir():
        raise DataError(f"images directory {images} does not exist or is not readable")
    if args.balance:
        plan = dp.build_balanced_splits(records, args.seed)
        records = [r for split in plan.splits for r in plan.records(split)]
    out = _out_dir(args.out)
    counts: dict[tuple[str, str], int] = {}
    for rec in records:
        try:
            png = dp.preprocess_image(images / rec.filename, rec.bbox, args.size)
        except (DataError, FileNotFoundError) as exc:
            rejects.append(dp.Rejection(0, f"{rec.filename}: {exc}"))
            continue
        d = dp.class_dir(out, rec.split, rec.label)
        d.mkdir(parents=True, exist_ok=True)
        (d / Path(rec.filename).name).write_bytes(png)
        counts[(rec.split, rec.class_name)] = counts.get((rec.split, rec.class_name), 0) + 1
    dp.write_rejections(out / "rejections.csv", rejects)
    for split in dp.SPLITS:
        line = ", ".join(f"{name}={counts.get((split, name), 0)}" for name in CLASS_NAMES)
        print(f"{split}: {line}")
    print(f"rejected: {len(rejects)} (see {out / 'rejections.csv'})")
    return EXIT_OK


def cmd_stats(args) -> int:
    records, rejects = dp.parse_metadata(args.metadata)
    rows = dp.dataset_stats(records)
    if args.out:
        dp.write_stats_csv(args.out, rows)
    sys.stdout.write(dp.format_stats(rows))
    if rejects:
        print(f"({len(rejects)} metadata rows rejected)")
    if args.out:
        print(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    trainer = Trainer(RunConfig.from_mapping(values))
    run_dir = trainer.run()
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, _, _ = load_checkpoint(args.checkpoint)
    k = net.spec.num_classes
    split_dir = Path(args.data) / args.split
    if split_dir.is_dir():
        present = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        if len(present) != k:
            raise DataError(f"checkpoint has {k} classes but {split_dir} has {len(present)} class directories")
    items = dp.scan_tree(args.data, args.split, CLASS_NAMES[:k])
    stream = dp.BatchStream(
        items, args.batch_size, 0, args.prefetch, net.spec.input_shape[1],
        net.spec.input_shape[0], shuffle=False, rescale=net.layers[0].kind != "rescale",
    )
    result = evaluate(net, stream)
    cm = result.confusion(k)
    report = result.report(k)
    out = _out_dir(args.out)
    (out / "report.txt").write_text(report.to_text())
    report.write_csv(out / "report.csv")
    write_confusion_csv(cm, out / "confusion.csv")
    write_confusion_csv(cm, out / "confusion_normalized.csv", normalized=True)
    with (out / "predictions.csv").open("w") as f:
        f.write("path,true,predicted,loss\n")
        for (path, _), t, p, loss in zip(items, result.labels, result.predictions, result.losses):
            f.write(f"{path},{t},{p},{loss!r}\n")
    sys.stdout.write(report.to_text())
    print(out)
    return EXIT_OK


def cmd_gradcam(args) -> int:
    net, _, _, _ = load_checkpoint(args.checkpoint)
    x = _network_input(net, args.image)
    cls = args.class_index
    if cls is None:
        logits, _ = net.eval().forward(x[None])
        cls = int(logits.argmax())
    heat = grad_cam(net, x, cls)
    base = x if net.layers[0].kind == "rescale" else x * 255
    image = np.clip(np.floor(base + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if image.shape[2] == 1:
        image = image[..., 0]
    out = _out_dir(args.out)
    stem = Path(args.image).stem
    png_path = out / f"{stem}_gradcam_class{cls}.png"
    csv_path = out / f"{stem}_heatmap_class{cls}.csv"
    png_path.write_bytes(overlay_png(image, heat.values, args.alpha))
    heat.write_csv(csv_path)
    print(png_path)
    print(csv_path)
    return EXIT_OK


def cmd_activations(args) -> int:
    net, _, _, _ = load_checkpoint(args.checkpoint)
    x = _network_input(net, args.image)
    layers = args.layer or [i for i, layer in enumerate(net.layers) if layer.kind in ("conv", "maxpool")]
    out = _out_dir(args.out)
    stem = Path(args.image).stem
    for i in layers:
        grid = activation_grid(net, x, i)
        path = out / f"{stem}_layer{i:02d}_{net.layers[i].kind}.png"
        path.write_bytes(grid.png())
        print(path)
    return EXIT_OK


def cmd_lr_range(args) -> int:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint).net
    else:
        net = build_network(reference_spec(image_size=args.image_size), SeededRng(args.seed), batchnorm_rule=True)
    items = dp.scan_tree(args.data, "train")
    stream = dp.BatchStream(
        items, args.batch_size, args.seed, args.prefetch, net.spec.input_shape[1],
        rescale=net.layers[0].kind != "rescale",
    )
    result = lr_range_test(net, stream.epoch(0), (args.low, args.high), args.steps)
    result.write_csv(args.out)
    if result.diverged:
        print(f"diverged after {len(result.rows)} steps")
    print(args.out)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data-dir", "--data", dest="data_dir", help="tree with train/ and valid/ class folders")
    p.add_argument("--run-dir", dest="run_dir", help="output run directory")
    p.add_argument("--epochs", type=int, help="total epochs to reach (required)")
    for f in fields(RunConfig):
        if f.name in ("data_dir", "run_dir", "epochs"):
            continue
        flag = "--" + f.name.replace("_", "-")
        typ = f.type if isinstance(f.type, str) else f.type.__name__
        if typ == "bool":
            p.add_argument(flag, dest=f.name, type=str, metavar="{true,false}", help=f"default {f.default}")
        else:
            conv = {"int": int, "float": float}.get(typ, str)
            p.add_argument(flag, dest=f.name, type=conv, help=f"default {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctnet", description="CT image classifier toolchain")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="crop to bounding boxes, resize, sort into class folders")
    p.add_argument("--metadata", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--balance", action="store_true", help="equalize classes per split before writing")
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("stats", help="class / country / sex / age distribution tables")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the reference network")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classification report and confusion matrices for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--prefetch", type=int, default=2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="Grad-CAM overlay and heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_index", type=int, help="default: predicted class")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("activations", help="intermediate activation grids for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, action="append", help="layer index; repeatable; default all conv/pool")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_activations)

    p = sub.add_parser("lr-range", help="learning-rate range test, written as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--low", type=float, default=1e-6)
    p.add_argument("--high", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--prefetch", type=int, default=2)
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh network")
    p.set_defaults(func=cmd_lr_range)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ctnet {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"ctnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - reported as the internal-error exit code
        print(f"ctnet {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
