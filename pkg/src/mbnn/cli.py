"""Command-line harness: ``mbnn {train,hpo,infer,sweep,tune-k}``.

Data files go to ``--out``; progress goes to stderr. Flags override values in
``--config`` (``key = value`` lines using the flag names), which override the
built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from mbnn import crossbar as xbar
from mbnn.bayesopt import TrialRecord
from mbnn.data import (
    CheckpointError,
    IdxFormatError,
    ResultRecord,
    load_checkpoint,
    load_mnist_dir,
    save_checkpoint,
    split,
    write_csv,
    write_results_csv,
)
from mbnn.mapping import map_model
from mbnn.nn import FP8, FR32, NetworkModel, TrainingError, evaluate, make_optimizer_config, train
from mbnn.tuning import tune_hyperparameters, tune_k

log = logging.getLogger("mbnn")

VARIANTS = {
    "fr32-bnn": "FR-32 BNN",
    "fp8-bnn": "FP-8 BNN",
    "fp8-mbnn": "FP-8 MBNN",
    "tfp8-mbnn": "TFP-8 MBNN",
}
REPRESENTATION = {"fr32-bnn": FR32, "fp8-bnn": FP8, "fp8-mbnn": FP8, "tfp8-mbnn": FP8}
OPTIMIZERS = ("adagrad", "adam", "sgd", "sgd-m0.8")
OPTIMIZER_LABELS = {"adagrad": "AdaGrad", "adam": "Adam", "sgd": "SGD_m=0", "sgd-m0.8": "SGD_m=0.8"}

# tuned FP-8 BNN settings for SGD with momentum 0.8
DEFAULT_BATCH_SIZE = 119
DEFAULT_T_CLIP = 0.89
DEFAULT_LR = 3.27e-3

EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_MISSING_FILE = 4
EXIT_BAD_INPUT = 5


class ConfigError(ValueError):
    pass


def float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(" ", "").split(",") if x]


def int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value file supplying flag defaults")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--data-dir", default=os.environ.get("MBNN_DATA_DIR", "data/mnist"),
                   help="directory with the MNIST IDX files; falls back to $MBNN_DATA_DIR")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--train-limit", type=int, default=None, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, default=None, help="use only the first N test images")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=sorted(VARIANTS), default="fp8-bnn", help="network variant")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")


def _crossbar(p: argparse.ArgumentParser, tuning_default: bool) -> None:
    p.add_argument("--checkpoint", required=False, default=None, help="trained model file")
    p.add_argument("--sigma", type=float_list, default=[0.0],
                   help="comma-separated device variation std devs in ohm")
    p.add_argument("--seeds", type=int_list, default=[0], help="comma-separated variation seeds")
    p.add_argument("--k", type=float, default=None, help="amplification factor for both layers; None means 4000")
    p.add_argument("--k1", type=float, default=None, help="amplification factor of conv1 (overrides --k)")
    p.add_argument("--k2", type=float, default=None, help="amplification factor of conv2 (overrides --k)")
    p.add_argument("--mode", choices=xbar.MODES, default=xbar.SEQUENTIAL, help="crossbar processing mode")
    p.add_argument("--trials", type=int, default=15, help="Bayesian trials for K tuning")
    p.add_argument("--val-limit", type=int, default=None,
                   help="use only the first N validation images for K tuning")
    p.add_argument("--r-on", type=float, default=1000.0, help="R_ON in ohm")
    p.add_argument("--r-off", type=float, default=2000.0, help="R_OFF in ohm")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--tune", dest="tune", action="store_true", default=tuning_default,
                   help="tune K per layer with Bayesian optimization")
    p.add_argument("--no-tune", dest="tune", action="store_false", help="keep K fixed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = sub.add_parser("train", help="train a digital binarized network", formatter_class=fmt)
    _common(p)
    _training(p)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd-m0.8", help="optimizer preset")
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE, help="mini-batch size")
    p.add_argument("--tclip", type=float, default=DEFAULT_T_CLIP, help="weight clipping threshold")
    p.add_argument("--lr", type=float, default=DEFAULT_LR, help="learning rate")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction of the training set for per-epoch validation; "
                        "0 trains on all of it and reports test accuracy per epoch")
    p.add_argument("--checkpoint", default="model.mbnn", help="checkpoint file name inside --out")

    p = sub.add_parser("hpo", help="Bayesian search of batch size, t_clip and learning rate", formatter_class=fmt)
    _common(p)
    _training(p)
    p.add_argument("--optimizer", type=lambda s: s.split(","), default=list(OPTIMIZERS),
                   help="comma-separated optimizer presets")
    p.add_argument("--trials", type=int, default=15, help="Bayesian trials per optimizer")

    for name, helptext, tuning_default in (
        ("infer", "test accuracy of a checkpoint on the digital or crossbar backend", False),
        ("sweep", "accuracy versus device variation, with and without K tuning", True),
        ("tune-k", "tune per-layer K on varied crossbars", True),
    ):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        _common(p)
        _crossbar(p, tuning_default)
        if name == "infer":
            p.add_argument("--backend", choices=("digital", "crossbar"), default=None,
                           help="None means: from --variant, else digital")
            p.add_argument("--variant", choices=sorted(VARIANTS), default=None,
                           help="None means: derived from checkpoint and backend")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        actions = {a.dest: a for a in subparser._actions}  # noqa: SLF001
        defaults = {}
        for key, raw in values.items():
            if key not in actions or key == "config":
                raise ConfigError(f"{args.config}: unknown setting {key!r} for '{args.command}'")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction) or isinstance(action, argparse._StoreFalseAction):  # noqa: SLF001
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_train(args):
    return load_mnist_dir(args.data_dir, "train").head(args.train_limit)


def _load_test(args):
    return load_mnist_dir(args.data_dir, "test").head(args.test_limit)


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _ks(args) -> tuple[float, float]:
    base = xbar.IDEAL_K if args.k is None else args.k
    return (base if args.k1 is None else args.k1, base if args.k2 is None else args.k2)


def _validation(args):
    """Held-out 20% of the training images (never the test set)."""
    _, val = split(_load_train(args), 0.8, args.seed)
    return val.head(args.val_limit)


def _trial_rows(history: Sequence[TrialRecord], names: Sequence[str]):
    for t in history:
        yield [t.index, *[t.point[n] for n in names], t.objective, t.seconds]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    if not 0 <= args.val_fraction < 1:
        raise ConfigError("--val-fraction must lie in [0, 1)")
    try:
        opt = make_optimizer_config(args.optimizer, args.lr, args.batch_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    train_set = _load_train(args)
    if args.val_fraction > 0:
        train_set, monitor = split(train_set, 1 - args.val_fraction, args.seed)
    else:
        monitor = _load_test(args)
    model = NetworkModel.initialize(args.tclip, REPRESENTATION[args.variant], args.seed)
    rows = []

    def report(m):
        log.info("epoch %d/%d loss %.4f train %.4f val %.4f", m.epoch, args.epochs, m.loss,
                 m.train_accuracy, m.val_accuracy)
        rows.append([m.epoch, m.loss, m.train_accuracy, m.val_accuracy])

    train(model, opt, train_set.images, train_set.labels, args.epochs, args.seed,
          monitor.images, monitor.labels, report)
    meta = {
        "variant": VARIANTS[args.variant], "optimizer": args.optimizer, "batch_size": args.batch_size,
        "t_clip": args.tclip, "lr": args.lr, "seed": args.seed, "epochs": args.epochs,
    }
    path = save_checkpoint(out / args.checkpoint, model, meta)
    write_csv(out / "epochs.csv", ["epoch", "train_loss", "train_accuracy", "val_accuracy"], rows)
    log.info("wrote %s", path)
    return 0


def cmd_hpo(args) -> int:
    unknown = [o for o in args.optimizer if o not in OPTIMIZERS]
    if unknown:
        raise ConfigError(f"unknown optimizer(s) {unknown}; choose from {OPTIMIZERS}")
    if args.trials < 1 or args.epochs < 1:
        raise ConfigError("--trials and --epochs must be >= 1")
    out = _out_dir(args)
    train_set, val_set = split(_load_train(args), 0.8, args.seed)
    rows = []
    for name in args.optimizer:
        def progress(t, name=name):
            log.info("%s trial %d/%d: %s -> %.4f", name, t.index + 1, args.trials, t.point, t.objective)

        res = tune_hyperparameters(name, train_set, val_set, args.trials, args.epochs, args.seed,
                                   REPRESENTATION[args.variant], callback=progress)
        rows.append([OPTIMIZER_LABELS[name], res.config.batch_size, res.t_clip, res.config.lr,
                     res.val_accuracy])
        write_csv(out / f"hpo_trials_{name}.csv",
                  ["trial", "batch_size", "t_clip", "lr", "objective", "seconds"],
                  _trial_rows(res.history, ["batch_size", "t_clip", "lr"]))
    write_csv(out / "hpo.csv", ["optimizer", "batch_size", "t_clip", "lr", "val_accuracy"], rows)
    return 0


def _variation_point(model, optimizer, test, val, sigma, seed, args, tune, experiment):
    """Fixed-K (and optionally tuned-K) test accuracy for one (sigma, seed)."""
    params = xbar.DeviceParams(args.r_on, args.r_off)
    spec = xbar.VariationSpec(sigma, seed)
    backend = map_model(model, params, args.mode, spec, _ks(args))
    k1, k2 = backend.ks
    acc = evaluate(model, test.images, test.labels, backend)
    rows = [ResultRecord(experiment, VARIANTS["fp8-mbnn"], optimizer, sigma, seed, k1, k2, acc)]
    history = []
    if tune:
        res = tune_k(model, backend, val.images, val.labels, args.trials, seed)
        history = res.history
        tuned = evaluate(model, test.images, test.labels, backend)
        rows.append(ResultRecord(experiment, VARIANTS["tfp8-mbnn"], optimizer, sigma, seed,
                                 res.ks[0], res.ks[1], tuned))
    overlap = xbar.state_overlap(backend.crossbars[0])
    return rows, history, overlap


def _run_points(model, optimizer, test, val, args, tune, experiment):
    tasks = [(s, seed) for s in args.sigma for seed in args.seeds]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_variation_point, model, optimizer, test, val, s, seed, args, tune, experiment)
                       for s, seed in tasks]
            results = []
            for i, f in enumerate(futures):
                results.append(f.result())
                log.info("%s point %d/%d done", experiment, i + 1, len(tasks))
    else:
        results = []
        for i, (s, seed) in enumerate(tasks):
            results.append(_variation_point(model, optimizer, test, val, s, seed, args, tune, experiment))
            log.info("%s point %d/%d (sigma=%g, seed=%d): %s", experiment, i + 1, len(tasks), s, seed,
                     ", ".join(f"{r.variant} {r.accuracy:.4f}" for r in results[-1][0]))
    return tasks, results


def _check_crossbar_model(ckpt):
    if ckpt.model.representation != FP8:
        raise ConfigError("crossbar backends need an FP-8 checkpoint (memristive variants are FP-8 only)")


def cmd_infer(args) -> int:
    ckpt = _load_model(args)
    model = ckpt.model
    variant = args.variant
    backend = args.backend
    if variant is None:
        if backend == "crossbar":
            variant = "tfp8-mbnn" if args.tune else "fp8-mbnn"
        else:
            variant = "fr32-bnn" if model.representation == FR32 else "fp8-bnn"
    wants_crossbar = variant.endswith("mbnn")
    if backend is None:
        backend = "crossbar" if wants_crossbar else "digital"
    if (backend == "crossbar") != wants_crossbar:
        raise ConfigError(f"variant {variant} does not run on the {backend} backend")
    if args.tune and variant != "tfp8-mbnn":
        raise ConfigError("K tuning is only valid for the tfp8-mbnn variant")
    if variant == "tfp8-mbnn":
        args.tune = True
    if REPRESENTATION[variant] != model.representation:
        raise ConfigError(f"checkpoint is {model.representation}, variant {variant} needs "
                          f"{REPRESENTATION[variant]}")
    out = _out_dir(args)
    test = _load_test(args)
    optimizer = ckpt.metadata.get("optimizer", "")
    if backend == "digital":
        if any(s != 0 for s in args.sigma) or any(v is not None for v in (args.k, args.k1, args.k2)):
            raise ConfigError("--sigma and --k flags need the crossbar backend")
        acc = evaluate(model, test.images, test.labels)
        log.info("%s test accuracy %.4f", VARIANTS[variant], acc)
        write_results_csv([ResultRecord("infer", VARIANTS[variant], optimizer, accuracy=acc)], out / "infer.csv")
        return 0
    val = _validation(args) if args.tune else None
    _, results = _run_points(model, optimizer, test, val, args, args.tune, "infer")
    records = [r for rows, _, _ in results for r in rows]
    if args.tune:
        records = [r for r in records if r.variant == VARIANTS["tfp8-mbnn"]]
    write_results_csv(records, out / "infer.csv")
    return 0


def cmd_sweep(args) -> int:
    ckpt = _load_model(args)
    _check_crossbar_model(ckpt)
    if not args.seeds:
        raise ConfigError("--seeds must list at least one seed")
    out = _out_dir(args)
    test = _load_test(args)
    val = _validation(args) if args.tune else None
    optimizer = ckpt.metadata.get("optimizer", "")
    tasks, results = _run_points(ckpt.model, optimizer, test, val, args, args.tune, "sweep")
    write_results_csv([r for rows, _, _ in results for r in rows], out / "sweep.csv")
    overlaps = {}
    for (sigma, _), (_, _, overlap) in zip(tasks, results):
        overlaps[sigma] = overlap
    write_csv(out / "overlap.csv", ["sigma", "bhattacharyya"], [[s, o] for s, o in overlaps.items()])
    return 0


def cmd_tune_k(args) -> int:
    ckpt = _load_model(args)
    _check_crossbar_model(ckpt)
    if not args.tune:
        raise ConfigError("tune-k with --no-tune has nothing to do; use 'infer --backend crossbar'")
    out = _out_dir(args)
    test = _load_test(args)
    val = _validation(args)
    optimizer = ckpt.metadata.get("optimizer", "")
    tasks, results = _run_points(ckpt.model, optimizer, test, val, args, True, "tune-k")
    write_results_csv([r for rows, _, _ in results for r in rows], out / "tune_k.csv")
    trials = []
    for (sigma, seed), (_, history, _) in zip(tasks, results):
        for row in _trial_rows(history, ["k1", "k2"]):
            trials.append([sigma, seed, *row])
    write_csv(out / "tune_k_trials.csv", ["sigma", "seed", "trial", "k1", "k2", "objective", "seconds"], trials)
    return 0


COMMANDS = {"train": cmd_train, "hpo": cmd_hpo, "infer": cmd_infer, "sweep": cmd_sweep, "tune-k": cmd_tune_k}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"mbnn: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mbnn: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (CheckpointError, IdxFormatError) as exc:
        print(f"mbnn: invalid input file: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingError as exc:
        print(f"mbnn: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    raise SystemExit(main())
