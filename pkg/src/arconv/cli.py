"""Command-line entry point: ``arconv <subcommand> [flags]``.

Exit codes: 0 success, 1 check failed, 2 usage error, 3 I/O or data error.
Errors print one line, ``arconv: error=<kind> reason=<json string>``.
"""
import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from ._validation import FormatError, PreprocessingError
from .bench import bench_convs
from .conv import param_saving
from .kernel_fit import FIG8_NOTE, GdOptions, run_fig6, run_fig7, run_fig8, summarize, write_reports_csv
from .model import ArConvNet, count_params, default_config, layer_depth, shape_trace, tiny_config
from .synthetic import blob_dataset
from .train import (
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_epochs,
    write_loss_curve,
    write_metrics,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
REFERENCE_BACKBONE = 1_316_376
REFERENCE_PACKAGE_KB = 16_037
BENCH_BAND = (0.8, 3.0)
# never embedded in artifacts: they name locations, not the computation
_NOT_CONFIG = {"func", "config", "out"}


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind, reason):
    print(f"arconv: error={kind} reason={json.dumps(str(reason))}", file=sys.stderr)


def _int_range(text):
    """``3-15`` (inclusive), ``3,5,7`` or a single integer."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer range {text!r}") from None


def _size(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"size must look like HxWxC, got {text!r}")
    return dims


def _resolved(args):
    cfg = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return json.loads(json.dumps(cfg, default=list))


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gd_options(args):
    return GdOptions(learning_rate=args.gd_lr, max_iter=args.gd_max_iter, tol=args.gd_tol,
                     n_restarts=args.gd_restarts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fig6(args):
    rep = run_fig6()
    print(rep.to_text(), end="")
    print(f"MAE {rep.mae:.4f}")
    if args.out:
        (_out(args) / "fig6.txt").write_text(
            "# config: " + json.dumps(_resolved(args), sort_keys=True) + "\n" + rep.to_text())
    if not rep.passed:
        raise CheckFailed(f"{len(rep.failures)} cell(s) outside tolerance")


def _sweep(args, runner, name):
    reports = runner(sizes=args.sizes, trials=args.trials, seed=args.seed, opts=_gd_options(args))
    out = _out(args)
    write_reports_csv(reports, out / f"{name}.csv", config=_resolved(args))
    rows = summarize(reports)
    with open(out / f"{name}_summary.csv", "w", newline="") as f:
        f.write("# config: " + json.dumps(_resolved(args), sort_keys=True) + "\n")
        w = csv.DictWriter(f, fieldnames=["size", "fitter", "mean_mae", "trials", "failed"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(dict(r, mean_mae=repr(r["mean_mae"])))
    for r in rows:
        print(f"size {r['size']:>3}  {r['fitter']:<10} mean MAE {r['mean_mae']:.3e}  failed {r['failed']}")
    return rows


def cmd_fig7(args):
    _sweep(args, run_fig7, "fig7")


def cmd_fig8(args):
    _sweep(args, run_fig8, "fig8")
    print("note:", FIG8_NOTE)


def cmd_bench(args):
    rep = bench_convs(args.iterations, args.size, args.seed, args.warmup)
    print(rep.to_text())
    if args.out:
        d = rep.as_dict()
        with open(_out(args) / "bench.csv", "w", newline="") as f:
            f.write("# config: " + json.dumps(_resolved(args), sort_keys=True) + "\n")
            w = csv.DictWriter(f, fieldnames=list(d), lineterminator="\n")
            w.writeheader()
            w.writerow(d)
    if args.check and rep.iterations and not BENCH_BAND[0] < rep.ratio < BENCH_BAND[1]:
        raise CheckFailed(f"ratio {rep.ratio:.3f} outside {BENCH_BAND}")


def cmd_preprocess(args):
    from .fundus import preprocess_directory

    rows = preprocess_directory(args.input, _out(args), args.target, args.margin)
    with open(Path(args.out) / "boxes.csv", "w", newline="") as f:
        f.write("# config: " + json.dumps(_resolved(args), sort_keys=True) + "\n")
        w = csv.DictWriter(f, fieldnames=["file", "top", "left", "bottom", "right", "threshold"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"cropped {len(rows)} image(s)")


def cmd_augment(args):
    from .fundus import load_labels_csv, materialize_dataset

    if not args.labels:
        raise UsageError("augment needs --labels CSV")
    samples = load_labels_csv(args.labels, args.schema, image_dir=args.images, image_ext=args.ext)
    rows = materialize_dataset(samples, _out(args), args.multiplier, args.merge_fraction, args.seed)
    (Path(args.out) / "config.json").write_text(json.dumps(_resolved(args), sort_keys=True) + "\n")
    print(f"wrote {len(rows)} sample(s)")


def _load_data(args):
    """Images and class indices from ``--synthetic N`` or a label file plus image directory."""
    if args.synthetic:
        return blob_dataset(args.synthetic, size=args.image_size, seed=args.data_seed)
    if not args.labels:
        raise UsageError("need --synthetic N or --labels CSV")
    from .fundus import FundusCropper, load_labels_csv

    samples = load_labels_csv(args.labels, args.schema, image_dir=args.images, image_ext=args.ext)
    crop = FundusCropper(target=args.image_size)
    X = crop.transform([s.load() for s in samples]).astype(np.float32)
    y = np.array([s.disease_risk for s in samples])
    return X, y


def _build_model(args):
    make = default_config if args.arch == "default" else tiny_config
    return ArConvNet(make(classes=args.classes), seed=args.seed, dtype=np.dtype(args.dtype))


def cmd_train(args):
    X, y = _load_data(args)
    model = _build_model(args)
    res = train_epochs(model, X, y, args.epochs, args.batch, seed=args.seed, lr=args.lr,
                       callback=lambda e, v: print(f"epoch {e + 1} loss {v:.6f}", flush=True))
    out = _out(args)
    cfg = _resolved(args)
    write_loss_curve(res.loss_curve, out / "loss.csv", config=cfg)
    report = evaluate(model, X, y)
    write_metrics(report, out / "train_metrics.csv", config=cfg)
    save_checkpoint(model, out / "model.arcv", res.optim_state, extra=cfg)
    print(f"weighted accuracy {report.weighted_accuracy:.4f} precision {report.weighted_precision:.4f}")


def cmd_eval(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    X, y = _load_data(args)
    report = evaluate(model, X, y)
    write_metrics(report, _out(args) / "metrics.csv", config=_resolved(args))
    print(f"weighted accuracy {report.weighted_accuracy:.4f} precision {report.weighted_precision:.4f}")


def cmd_summary(args):
    cfg = default_config(args.classes)
    print(f"{'layer':<16} {'input':<16} {'output':<16}")
    for name, i, o in shape_trace(cfg):
        print(f"{name:<16} {'x'.join(map(str, i)):<16} {'x'.join(map(str, o)):<16}")
    backbone = count_params(cfg, with_head=False)
    full = count_params(cfg)
    print()
    print(backbone.to_text(REFERENCE_BACKBONE))
    print(f"head parameter delta ({args.classes} classes): {full.total - backbone.total}")
    depth = layer_depth(cfg)
    print(f"parameterized layers: {depth['conv_dense']} conv/dense, {depth['with_bn']} counting batch norm")
    print(f"arconv spatial saving per channel (n=3): {param_saving(3):.4f}")
    buf = io.BytesIO()
    size = save_checkpoint(ArConvNet(cfg, seed=args.seed, dtype=np.dtype(args.dtype)), buf)
    print(f"checkpoint size: {size / 1024:.0f} KB ({args.dtype}); reference packaged size {REFERENCE_PACKAGE_KB} KB")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="arconv_out", help="output directory")
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    common.add_argument("--dtype", choices=["float32", "float64"], default="float32")

    parser = _Parser(prog="arconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = add("fig6", cmd_fig6, "reproduce the worked 5x5 example")
    p.set_defaults(out=None)
    for name, func, what in (("fig7", cmd_fig7, "2D-kernel targets"), ("fig8", cmd_fig8, "ArConv targets")):
        p = add(name, func, f"kernel estimation sweep on {what}")
        p.add_argument("--sizes", type=_int_range, default=list(range(3, 16)))
        p.add_argument("--trials", type=int, default=25)
        p.add_argument("--gd-lr", type=float, default=GdOptions.learning_rate)
        p.add_argument("--gd-max-iter", type=int, default=GdOptions.max_iter)
        p.add_argument("--gd-tol", type=float, default=GdOptions.tol)
        p.add_argument("--gd-restarts", type=int, default=GdOptions.n_restarts)
    p = add("bench", cmd_bench, "time 3x3 depthwise conv against ArConv")
    p.set_defaults(out=None)
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--size", type=_size, default=(5, 5, 1))
    p.add_argument("--check", action="store_true", help=f"fail unless the ratio lies in {BENCH_BAND}")
    p = add("preprocess", cmd_preprocess, "mask and crop a directory of images")
    p.add_argument("--input", required=True)
    p.add_argument("--target", type=int, default=224)
    p.add_argument("--margin", type=float, default=0.02)

    def data_flags(p):
        p.add_argument("--labels")
        p.add_argument("--images")
        p.add_argument("--schema", choices=["rfmid", "generic_binary"], default="rfmid")
        p.add_argument("--ext", default=".png")

    p = add("augment", cmd_augment, "materialize an augmented and merged dataset")
    data_flags(p)
    p.add_argument("--multiplier", type=int, default=2)
    p.add_argument("--merge-fraction", type=float, default=0.0)
    for name, func, help in (("train", cmd_train, "train a binary classifier"),
                             ("eval", cmd_eval, "evaluate a checkpoint")):
        p = add(name, func, help)
        data_flags(p)
        p.add_argument("--synthetic", type=int, default=0, help="use N synthetic blob images")
        p.add_argument("--data-seed", type=int, default=0)
        p.add_argument("--image-size", type=int, default=224)
        if name == "train":
            p.add_argument("--arch", choices=["default", "tiny"], default="default")
            p.add_argument("--classes", type=int, default=2)
            p.add_argument("--epochs", type=int, default=20)
            p.add_argument("--batch", type=int, default=32)
            p.add_argument("--lr", type=float, default=1e-4)
        else:
            p.add_argument("--checkpoint", required=True)
    p = add("summary", cmd_summary, "architecture, parameter ledger and checkpoint size")
    p.add_argument("--classes", type=int, default=2)
    return parser, sub


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse(argv):
    parser, sub = build_parser()
    path = _config_path(argv)
    if path:
        try:
            with open(path) as f:
                defaults = json.load(f)
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from None
        except ValueError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(defaults, dict):
            raise UsageError("config file must hold a JSON object")
        first = parser.parse_args(argv)
        target = sub.choices[first.command]
        known = {a.dest for a in target._actions}
        unknown = set(k.replace("-", "_") for k in defaults) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        target.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    return parser.parse_args(argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        args.func(args)
    except UsageError as e:
        _fail("usage", e)
        return EXIT_USAGE
    except CheckFailed as e:
        _fail("check", e)
        return EXIT_FAIL
    except (OSError, FormatError, PreprocessingError) as e:
        _fail("io", e)
        return EXIT_IO
    except ValueError as e:
        _fail("usage", e)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
