"""Command-line entry point: ``perfnn <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
Log lines go to stderr as ``key=value`` pairs.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
import time

import numpy as np

from . import deconv, harness, io, metrics
from . import neuralnet as nn
from .augment import AugmentConfig, augment_batch, expand_dataset
from .parallel import set_threads
from .simulate import ConfigError, SimConfig, generate_dataset

logger = logging.getLogger("perfnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_DIR_ENV = "PERFNN_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(kind):
    def parse(text):
        parts = text.replace(",", " ").split()
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return tuple(kind(p) for p in parts)
    return parse


def _common(p: argparse.ArgumentParser, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="master random seed (default: time-derived, logged)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap for parallel stages; 1 = fully serial (default: all cores)")
    p.add_argument("--verbose", "-v", action="store_true", help="debug-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perfnn", description="Perfusion parameter estimation benchmark.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")
    sub.required = True

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=None, help="number of samples, one AIF each (same as --n-aifs N --tccs-per-aif 1)")
    p.add_argument("--n-aifs", type=int, default=None, help="number of distinct AIFs")
    p.add_argument("--tccs-per-aif", type=int, default=1, help="TCCs sharing each AIF (default 1)")
    p.add_argument("--sigma", type=float, default=1.0, help="noise standard deviation in HU (default 1)")
    p.add_argument("--target", choices=["cbf", "tmax"], default="cbf",
                   help="selects the CBV range: cbf -> 0.1-6%%, tmax -> 2-6%% (default cbf)")
    p.add_argument("--cbv-range", type=_pair(float), default=None, help="explicit CBV range 'lo,hi'")
    p.add_argument("--fine-dt", type=float, default=0.01, help="convolution quadrature step in s (default 0.01)")
    p.add_argument("--out", required=True, help="output dataset file (.bin)")
    p.add_argument("--csv", default=None, help="also write a CSV export here")
    _common(p)

    p = sub.add_parser("augment", help="materialize shift/scale augmented copies of a dataset")
    p.add_argument("--in", dest="inp", required=True, help="input dataset file")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--factor", type=int, default=10, help="augmented copies per sample (default 10)")
    p.add_argument("--shift-range", type=_pair(int), default=(-1, 2), help="integer shift range 'lo,hi' (default -1,2)")
    p.add_argument("--scale-range", type=_pair(float), default=(0.7, 1.3), help="scale range 'lo,hi' (default 0.7,1.3)")
    _common(p)

    p = sub.add_parser("deconv", help="SVD deconvolution estimates for a dataset")
    p.add_argument("--dataset", required=True, help="input dataset file")
    p.add_argument("--lambda-rel", type=float, default=None,
                   help="relative Tikhonov strength; omitted -> tuned on the dataset itself")
    p.add_argument("--target", choices=["cbf", "tmax"], required=True, help="parameter to estimate")
    p.add_argument("--no-spline", action="store_true", help="disable parabolic Tmax refinement")
    p.add_argument("--out", required=True, help="output CSV (sample_idx, truth, estimate)")
    _common(p, seed=False)

    p = sub.add_parser("train", help="train the regression network")
    p.add_argument("--dataset", required=True, help="training dataset file")
    p.add_argument("--target", choices=["cbf", "tmax"], default="cbf", help="parameter to learn (default cbf)")
    p.add_argument("--iterations", type=int, default=None,
                   help="SGD steps (default: one epoch, at least 1)")
    p.add_argument("--epochs", type=int, default=None, help="alternative to --iterations")
    p.add_argument("--batch-size", type=int, default=2048, help="minibatch size (default 2048)")
    p.add_argument("--learning-rate", type=float, default=0.01, help="SGD learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, default=0.9, help="Nesterov momentum (default 0.9)")
    p.add_argument("--augment", action="store_true", help="augment every drawn batch on the fly")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--loss-csv", default=None, help="per-iteration loss trace CSV (default: <out>.loss.csv)")
    _common(p)

    p = sub.add_parser("evaluate", help="score a trained network on a dataset")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--target", choices=["cbf", "tmax"], required=True, help="parameter the model predicts")
    p.add_argument("--out", default=None, help="optional CSV (sample_idx, truth, estimate)")
    _common(p, seed=False)

    for name, help_text in (("sweep", "noise-level comparison of deconvolution and network"),
                            ("datasize", "training-set size x augmentation experiment")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI file with [experiment] and [augment] sections")
        p.add_argument("--profile", choices=sorted(harness.PROFILES), default=None,
                       help="dataset sizes: desk (100k train) or full (1M train)")
        p.add_argument("--targets", default=None, help="comma-separated subset of cbf,tmax")
        p.add_argument("--train-size", type=int, default=None, help="training samples (sweep)")
        p.add_argument("--test-size", type=int, default=None, help="test samples")
        p.add_argument("--nn-iterations", type=int, default=None, help="SGD steps per network")
        p.add_argument("--nn-epochs", default=None, help="epochs per network; overrides --nn-iterations")
        p.add_argument("--lambda-samples", type=int, default=None, help="training subsample for lambda tuning")
        p.add_argument("--record-runtime", action="store_true",
                       help="fill runtime_s (makes results.csv non-reproducible)")
        if name == "sweep":
            p.add_argument("--sigmas", default=None, help="comma-separated noise levels")
        else:
            p.add_argument("--size-grid", default=None, help="cells like '10x10,30x1'")
            p.add_argument("--augment-factor", type=int, default=None, help="augmentation factor (default 10)")
        p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs/{name})")
        p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
        _common(p)

    p = sub.add_parser("plot", help="render figures from a results CSV")
    p.add_argument("--results", required=True, help="results.csv from sweep or datasize")
    p.add_argument("--kind", choices=["noise_sweep", "data_size"], default=None, help="figure type (default: inferred)")
    p.add_argument("--scatter-dir", default=None, help="directory with scatter_*.csv files")
    p.add_argument("--histogram-dataset", default=None, help="also plot parameter histograms of this dataset")
    p.add_argument("--out-dir", required=True, help="where to write SVG files")
    _common(p, seed=False)
    return parser


def _log(**kv):
    logger.info(" ".join(f"{k}={v}" for k, v in kv.items()))


def _seed(args) -> int:
    if getattr(args, "seed", None) is None:
        args.seed = int(time.time_ns() % (2**31))
        _log(event="seed", source="time", seed=args.seed)
    return args.seed


def _read(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return io.read_dataset(path)


def _write_estimates(path, truths, estimates):
    io.ensure_parent(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_idx", "truth", "estimate"])
        for i, (t, e) in enumerate(zip(truths, estimates)):
            w.writerow([i, repr(float(t)), repr(float(e))])


def cmd_simulate(args):
    seed = _seed(args)
    if (args.n is None) == (args.n_aifs is None):
        raise UsageError("give exactly one of --n or --n-aifs")
    n_aifs = args.n if args.n is not None else args.n_aifs
    tccs = 1 if args.n is not None else args.tccs_per_aif
    cfg = harness.sim_config_for(args.target, args.sigma).replace(fine_dt=args.fine_dt, rng_seed=seed)
    if args.cbv_range:
        cfg = cfg.replace(cbv_range=args.cbv_range)
    ds = generate_dataset(cfg, n_aifs, tccs, seed=seed)
    io.ensure_parent(args.out)
    io.write_dataset(args.out, ds)
    if args.csv:
        io.write_dataset_csv(args.csv, ds)
    _log(event="simulate", n=len(ds), sigma=args.sigma, seed=seed, out=args.out)


def cmd_augment(args):
    seed = _seed(args)
    ds = _read(args.inp)
    cfg = AugmentConfig(args.shift_range, args.scale_range, args.factor, seed)
    out = expand_dataset(ds, cfg)
    io.ensure_parent(args.out)
    io.write_dataset(args.out, out)
    _log(event="augment", n_in=len(ds), n_out=len(out), seed=seed, out=args.out)


def cmd_deconv(args):
    ds = _read(args.dataset)
    lam = args.lambda_rel
    if lam is None:
        lam = deconv.tune_lambda(ds, args.target, spline_refine=not args.no_spline)
    deconv.DeconvConfig(lam, ds.grid, not args.no_spline)
    est = deconv.estimate(ds, args.target, [lam], spline_refine=not args.no_spline)[:, 0]
    _write_estimates(args.out, ds.target(args.target), est)
    res = metrics.evaluate(est, ds.target(args.target), args.target)
    _log(event="deconv", lambda_rel=lam, mad=f"{res.mad:.6g}", scale=f"{res.optimal_scale:.6g}", n=res.n, out=args.out)


def cmd_train(args):
    seed = _seed(args)
    ds = _read(args.dataset)
    if args.iterations is not None and args.epochs is not None:
        raise UsageError("give at most one of --iterations and --epochs")
    if args.iterations is not None:
        iters = args.iterations
    else:
        iters = max(1, (args.epochs or 1) * len(ds) // args.batch_size)
    init_seed, train_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    model = nn.init_model(np.random.default_rng(init_seed), ds.grid.n_samples)
    cfg = nn.TrainConfig(args.learning_rate, args.momentum, args.batch_size, iters, train_seed, args.target)
    augmenter = (lambda a, t, rng: augment_batch(a, t, rng)) if args.augment else None
    model, trace = nn.train(model, ds, cfg, augmenter)
    io.ensure_parent(args.out)
    io.write_checkpoint(args.out, model)
    loss_csv = args.loss_csv or args.out + ".loss.csv"
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    _log(event="train", iterations=iters, final_loss=f"{trace[-1]:.6g}", seed=seed, out=args.out)


def cmd_evaluate(args):
    if not os.path.exists(args.model):
        raise FileNotFoundError(args.model)
    model = io.read_checkpoint(args.model)
    ds = _read(args.dataset)
    pred = nn.predict_dataset(model, ds)
    res = metrics.evaluate(pred, ds.target(args.target), args.target)
    if args.out:
        _write_estimates(args.out, ds.target(args.target), pred)
    print(f"mad={res.mad:.6g} scale={res.optimal_scale:.6g} n={res.n}")


def _spec_from_args(args, kind):
    overrides = {
        "profile": args.profile,
        "targets": args.targets,
        "train_size": args.train_size,
        "test_size": args.test_size,
        "nn_iterations": args.nn_iterations,
        "nn_epochs": args.nn_epochs,
        "lambda_samples": args.lambda_samples,
        "seed": args.seed,
    }
    if args.record_runtime:
        overrides["record_runtime"] = "true"
    if kind == "noise_sweep":
        overrides["sigmas"] = args.sigmas
    else:
        overrides["size_grid"] = args.size_grid
        overrides["augment.factor"] = args.augment_factor
    if args.seed is None and not _config_sets_seed(args.config):
        overrides["seed"] = _seed(args)
    overrides = {k: None if v is None else str(v) for k, v in overrides.items()}
    return harness.load_spec(args.config, overrides, kind=kind)


def _config_sets_seed(path) -> bool:
    if not path or not os.path.exists(path):
        return False
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(path)
    return parser.has_option("experiment", "seed")


def _run_experiment(args, kind):
    spec = _spec_from_args(args, kind)
    name = "sweep" if kind == "noise_sweep" else "datasize"
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV) or os.path.join("runs", name)
    os.makedirs(out_dir, exist_ok=True)
    _log(event="start", experiment=kind, seed=spec.seed, out_dir=out_dir)
    if kind == "noise_sweep":
        rows = harness.run_noise_sweep(spec, out_dir)
    else:
        rows = harness.run_data_size(spec, out_dir)
    if not args.no_plots:
        from .plots import render_plots
        render_plots(rows, os.path.join(out_dir, "figures"), kind=kind, scatter_dir=out_dir)
    _log(event="done", rows=len(rows), results=os.path.join(out_dir, "results.csv"))


def cmd_plot(args):
    from .plots import plot_histograms, render_plots
    if not os.path.exists(args.results):
        raise FileNotFoundError(args.results)
    rows = harness.read_results(args.results)
    written = render_plots(rows, args.out_dir, kind=args.kind, scatter_dir=args.scatter_dir)
    if args.histogram_dataset:
        written.append(plot_histograms(_read(args.histogram_dataset),
                                       os.path.join(args.out_dir, "parameter_histograms.svg")))
    _log(event="plot", figures=len(written), out_dir=args.out_dir)


COMMANDS = {
    "simulate": cmd_simulate,
    "augment": cmd_augment,
    "deconv": cmd_deconv,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": lambda a: _run_experiment(a, "noise_sweep"),
    "datasize": lambda a: _run_experiment(a, "data_size"),
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="level=%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except UsageError as exc:
        _log(event="error", kind="usage", message=repr(str(exc)))
        return EXIT_USAGE
    except (FileNotFoundError, io.FormatError, ConfigError, ValueError) as exc:
        _log(event="error", kind="data", message=repr(str(exc)))
        return EXIT_DATA
    except (nn.TrainingDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _log(event="error", kind="numerical", message=repr(str(exc)))
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
