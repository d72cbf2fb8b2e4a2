"""Command-line driver for the synthetic, verification and training experiments.

Exit codes: 0 success, 2 invalid arguments, 3 missing or unreadable data,
4 training diverged, 1 any other failure (for example an unwritable output).
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiments
from .data import DATA_DIR_ENV, IdxParseError, load_mnist_splits, resolve_data_dir, write_report
from .nn import DivergenceError, train
from .sampling import SELECTIONS, Policy
from .tensor import DomainError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
CNN_FULL_ITERATIONS = 20000

log = logging.getLogger("crsapprox")


class UsageError(Exception):
    """Flag values that parse but cannot be used together."""


# ---------------------------------------------------------------- argument types

def _bool(text):
    value = text.strip().lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _ratio(text):
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < r <= 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1], got {r}")
    return r


def _ratio_list(text):
    return tuple(_ratio(part) for part in text.split(",") if part.strip())


def _choice_list(choices):
    def parse(text):
        items = tuple(part.strip() for part in text.split(",") if part.strip())
        if "all" in items:
            return tuple(choices)
        bad = [i for i in items if i not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)} or all")
        return items
    return parse


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be non-negative, got {v}")
    return v


# ---------------------------------------------------------------- parser

def _output_flags(p, default_out):
    p.add_argument("--out", type=Path, default=Path(default_out), help="report path")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the PNG written next to the report")


def build_parser():
    parser = argparse.ArgumentParser(prog="crsapprox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-matmul", help="CRS error sweep on random square products")
    p.add_argument("--ensemble", type=_choice_list(tuple(experiments.ENSEMBLES)), default=("n11",),
                   help="n11: A, B ~ N(1,1); n01: A ~ N(0,1), B ~ N(1,1); comma list or all")
    p.add_argument("--policy", type=_choice_list(SELECTIONS), default=SELECTIONS,
                   help="selection rules, comma list or all")
    p.add_argument("--replacement", type=_bool, default=None,
                   help="restrict random policies to one replacement mode")
    p.add_argument("--scaled", type=_bool, default=None,
                   help="restrict random policies to scaled or unscaled")
    p.add_argument("--ratio", type=_ratio_list, default=experiments.DEFAULT_RATIOS)
    p.add_argument("--trials", type=_positive, default=1000)
    p.add_argument("--size", type=_positive, default=100)
    p.add_argument("--seed", type=_seed, default=17)
    _output_flags(p, "synth_matmul.csv")

    p = sub.add_parser("verify-conv", help="enumeration checks of the convolution estimator")
    p.add_argument("--perturbations", type=_positive, default=100)
    p.add_argument("--seed", type=_seed, default=0)
    _output_flags(p, "verify_conv.csv")

    for name, model in (("train", None), ("train-mlp", "mlp"), ("train-cnn", "cnn")):
        p = sub.add_parser(name, help="MNIST training with sampled products")
        if model is None:
            p.add_argument("--model", choices=("mlp", "cnn"), required=True)
        else:
            p.set_defaults(model=model)
        p.add_argument("--ratio", type=_ratio, default=None,
                       help="forward sampling ratio; omitted means exact forward products")
        p.add_argument("--policy", choices=SELECTIONS, default="topk")
        p.add_argument("--replacement", type=_bool, default=False)
        p.add_argument("--scaled", type=_bool, default=False)
        p.add_argument("--backprop", choices=("none", "crs", "meprop"), default="none")
        p.add_argument("--backprop-ratio", type=_ratio, default=None)
        p.add_argument("--backprop-min-k", type=_positive, default=10)
        p.add_argument("--epochs", type=_positive, default=None)
        p.add_argument("--iterations", type=_positive, default=None)
        p.add_argument("--full", action="store_true",
                       help=f"CNN only: train for {CNN_FULL_ITERATIONS} iterations")
        p.add_argument("--batch-size", type=_positive, default=50)
        p.add_argument("--eval-every", type=_positive, default=None)
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--data-dir", type=Path, default=None,
                       help=f"MNIST IDX directory (default ${DATA_DIR_ENV} or data/mnist)")
        _output_flags(p, f"train_{model or 'model'}.csv")
    return parser


# ---------------------------------------------------------------- commands

def _sibling(path, suffix):
    return path.with_name(path.stem + suffix)


def cmd_synth_matmul(args):
    reps = (True, False) if args.replacement is None else (args.replacement,)
    scs = (True, False) if args.scaled is None else (args.scaled,)
    sweep = experiments.synth_matmul(args.ensemble, args.ratio, args.trials, args.seed,
                                     args.size, args.policy, reps, scs)
    write_report(sweep.rows, args.out, args.format)
    if not args.no_figure:
        from .plotting import plot_synth
        plot_synth(sweep.rows, _sibling(args.out, ".png"))
    return EXIT_OK


def cmd_verify_conv(args):
    check = experiments.verify_conv(args.seed, args.perturbations)
    write_report(experiments.verify_rows(check, args.seed, args.perturbations), args.out,
                 args.format)
    if not args.no_figure:
        from .plotting import plot_perturbations
        plot_perturbations(check, _sibling(args.out, ".png"))
    print(f"unbiasedness residual {check.unbiasedness:.3e}, "
          f"expected error residual {check.expected_error:.3e}, "
          f"optimality margin {check.optimality_margin:.3e}")
    return EXIT_OK


def _train_setup(args):
    if args.full and args.model != "cnn":
        raise UsageError("--full applies to the CNN only")
    if args.full and (args.epochs or args.iterations):
        raise UsageError("--full fixes the budget; drop --epochs/--iterations")
    if args.epochs and args.iterations:
        raise UsageError("give at most one of --epochs and --iterations")
    if args.backprop == "none" and args.backprop_ratio is not None:
        raise UsageError("--backprop-ratio needs --backprop crs or meprop")
    if args.backprop != "none" and args.backprop_ratio is None:
        raise UsageError(f"--backprop {args.backprop} needs --backprop-ratio")
    if args.policy == "topk" and (args.replacement or args.scaled):
        raise UsageError("top-k is always unscaled and without replacement")
    iterations = CNN_FULL_ITERATIONS if args.full else args.iterations
    backprop = "crs" if args.backprop == "none" else args.backprop
    try:
        config = experiments.training_config(
            args.model, args.ratio, args.backprop_ratio, backprop, args.policy,
            args.replacement, args.scaled, args.backprop_min_k, args.epochs, iterations,
            args.batch_size, args.seed, args.eval_every)
    except (ValueError, DomainError) as exc:
        raise UsageError(str(exc)) from exc
    return config


def _describe_training(args):
    fwd = "exact"
    if args.ratio is not None:
        fwd = Policy(args.policy, args.replacement, args.scaled, ratio=args.ratio).describe()
        fwd = f"{fwd}-{args.ratio:g}"
    if args.backprop == "none":
        return f"{args.model}/fwd-{fwd}"
    return f"{args.model}/fwd-{fwd}/bwd-{args.backprop}-{args.backprop_ratio:g}"


def _write_curves(curves, path):
    cols = ["step", "epoch", "train_loss", "val_accuracy", "test_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for c in curves:
            w.writerow([c["step"]] + [format(float(c[k]), ".17g") for k in cols[1:]])


def _write_ledger(ledger, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "pass", "macs_exact", "macs_actual"])
        w.writerows(ledger.rows())


def cmd_train(args):
    config = _train_setup(args)
    directory = resolve_data_dir(args.data_dir)
    data = load_mnist_splits(directory)
    desc = _describe_training(args)

    def report(point):
        log.info("step %d epoch %.2f loss %.4f val %.4f test %.4f", point["step"],
                 point["epoch"], point["train_loss"], point["val_accuracy"],
                 point["test_accuracy"])

    result = train(config, data, callback=report)
    rows = experiments.training_rows(result, config, f"train-{args.model}", desc, args.ratio,
                                     args.seed)
    write_report(rows, args.out, args.format)
    _write_curves(result.curves, _sibling(args.out, ".curves.csv"))
    _write_ledger(result.ledger, _sibling(args.out, ".ledger.csv"))
    if not args.no_figure:
        from .plotting import plot_curves
        plot_curves(result.curves, _sibling(args.out, ".png"), desc)
    print(f"{desc}: test accuracy {result.final_test_accuracy:.4f} "
          f"(at best validation {result.selected_test_accuracy:.4f}), "
          f"compute reduction {rows[0].compute_reduction:.4f}")
    return EXIT_OK


COMMANDS = {
    "synth-matmul": cmd_synth_matmul,
    "verify-conv": cmd_verify_conv,
    "train": cmd_train,
    "train-mlp": cmd_train,
    "train-cnn": cmd_train,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"crsapprox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"crsapprox: MNIST file not found: {exc}\n"
              f"hint: put the four IDX files in that directory, pass --data-dir, "
              f"or set {DATA_DIR_ENV}", file=sys.stderr)
        return EXIT_DATA
    except IdxParseError as exc:
        print(f"crsapprox: unreadable MNIST data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"crsapprox: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"crsapprox: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
