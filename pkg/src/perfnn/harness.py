"""End-to-end experiments: noise sweep and training-set size x augmentation.

Every random stage draws from a seed derived from ``(master_seed, stage,
target, ...)`` so train and test data never share a stream and reruns are
byte-identical. Stage outputs (clean datasets, tuned lambdas, models, result
rows) are cached under ``<out_dir>/stages`` and reused on rerun.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import deconv, io, metrics
from . import neuralnet as nn
from .augment import AugmentConfig, expand_dataset
from .simulate import (
    CBF_CBV_RANGE,
    TMAX_CBV_RANGE,
    ConfigError,
    Dataset,
    SimConfig,
    add_noise,
    generate_clean,
)

logger = logging.getLogger(__name__)

TARGETS = ("cbf", "tmax")
DEFAULT_SIGMAS = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2)
DEFAULT_SIZE_GRID = tuple((a, t) for a in (10, 30, 100, 300) for t in (1, 10, 100))
ONE_EPOCH_ITERATIONS = 1_000_000 // 2048

PROFILES = {
    "desk": {"train_size": 100_000, "test_size": 10_000},
    "full": {"train_size": 1_000_000, "test_size": 10_000},
}
# One pass over 100k samples leaves the network undertrained, so the desk
# noise sweep runs ten times the one-epoch-at-1M step count (100 epochs).
DESK_SWEEP_ITERATIONS = 10 * ONE_EPOCH_ITERATIONS

# stage keys for seed derivation
_TRAIN, _TEST, _TRAIN_NOISE, _TEST_NOISE, _NN_INIT, _NN_TRAIN, _LAMBDA, _AUGMENT = range(1, 9)


def derive_seed(master: int, *keys: int) -> int:
    state = np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _sigma_key(sigma: float) -> int:
    return int(round(sigma * 1e6))


def _target_key(target: str) -> int:
    return TARGETS.index(target)


def sim_config_for(target: str, sigma: float = 1.0) -> SimConfig:
    return SimConfig(cbv_range=CBF_CBV_RANGE if target == "cbf" else TMAX_CBV_RANGE, noise_sigma=sigma)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "noise_sweep"
    targets: Tuple[str, ...] = TARGETS
    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    size_grid: Tuple[Tuple[int, int], ...] = DEFAULT_SIZE_GRID
    augment: Optional[AugmentConfig] = AugmentConfig()
    train_size: int = 100_000
    test_size: int = 10_000
    nn_epochs: Optional[int] = None
    nn_iterations: int = ONE_EPOCH_ITERATIONS
    seed: int = 0
    lambda_samples: int = 10_000
    record_runtime: bool = False

    def __post_init__(self):
        if self.kind not in ("noise_sweep", "data_size"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for t in self.targets:
            if t not in TARGETS:
                raise ConfigError(f"unknown target {t!r}")
        if self.kind == "noise_sweep" and not self.sigmas:
            raise ConfigError("noise sweep needs at least one sigma")
        if self.kind == "data_size" and not self.size_grid:
            raise ConfigError("data-size experiment needs a size grid")

    def iterations_for(self, n_train: int, batch_size: int = 2048) -> int:
        if self.nn_epochs is not None:
            return max(1, self.nn_epochs * n_train // batch_size)
        return self.nn_iterations


@dataclass
class ResultRow:
    method: str
    target: str
    sigma: float
    n_aifs: int
    tccs_per_aif: int
    augmented: bool
    mad: float
    optimal_scale: float
    lambda_rel: Optional[float] = None
    runtime_s: Optional[float] = None


RESULT_FIELDS = [f.name for f in dataclasses.fields(ResultRow)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path, rows: Sequence[ResultRow]) -> None:
    io.ensure_parent(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in RESULT_FIELDS])


def read_results(path) -> List[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ResultRow(
                method=rec["method"],
                target=rec["target"],
                sigma=float(rec["sigma"]),
                n_aifs=int(rec["n_aifs"]),
                tccs_per_aif=int(rec["tccs_per_aif"]),
                augmented=rec["augmented"] == "true",
                mad=float(rec["mad"]),
                optimal_scale=float(rec["optimal_scale"]),
                lambda_rel=float(rec["lambda_rel"]) if rec["lambda_rel"] else None,
                runtime_s=float(rec["runtime_s"]) if rec["runtime_s"] else None,
            ))
    return rows


def write_scatter(path, truths, estimates, *, method: str, target: str, sigma: float, scale: float = 1.0) -> None:
    """Per-sample (truth, estimate) pairs; estimates are raw, the optimal scale goes in the header."""
    io.ensure_parent(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# method={method} target={target} sigma={sigma!r} optimal_scale={scale!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_idx", "truth", "estimate"])
        for i, (t, e) in enumerate(zip(truths, estimates)):
            w.writerow([i, repr(float(t)), repr(float(e))])


def read_scatter(path):
    meta = {}
    with open(path, newline="") as fh:
        first = fh.readline()
        for item in first.lstrip("# ").split():
            k, v = item.split("=", 1)
            meta[k] = v
        rows = list(csv.DictReader(fh))
    truth = np.array([float(r["truth"]) for r in rows])
    est = np.array([float(r["estimate"]) for r in rows])
    return meta, truth, est


class StageCache:
    """Stage outputs under ``root``; ``None`` disables caching."""

    def __init__(self, root: Optional[str]):
        self.root = root
        if root:
            os.makedirs(root, exist_ok=True)

    def _path(self, name):
        return os.path.join(self.root, name)

    def dataset(self, name: str, build: Callable[[], Dataset]) -> Dataset:
        if not self.root:
            return build()
        path = self._path(name + ".bin")
        if os.path.exists(path):
            return io.read_dataset(path)
        ds = build()
        io.write_dataset(path, ds)
        return ds

    def model(self, name: str, build: Callable[[], nn.MlpModel]) -> nn.MlpModel:
        if not self.root:
            return build()
        path = self._path(name + ".pmlp")
        if os.path.exists(path):
            return io.read_checkpoint(path)
        model = build()
        io.write_checkpoint(path, model)
        return model

    def record(self, name: str, build: Callable[[], dict]) -> dict:
        if not self.root:
            return build()
        path = self._path(name + ".json")
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)
        rec = build()
        with open(path, "w") as fh:
            json.dump(rec, fh, sort_keys=True)
        return rec


def _stage_root(spec: ExperimentSpec, out_dir: Optional[str]) -> Optional[str]:
    """Cache directory keyed by every ExperimentSpec field that can change a stage output."""
    if not out_dir:
        return None
    key = dataclasses.replace(spec, record_runtime=False)
    digest = hashlib.sha256(repr(key).encode()).hexdigest()[:12]
    return os.path.join(out_dir, "stages", digest)


def _clean_set(cache: StageCache, spec: ExperimentSpec, target: str, stage: int, n: int, tccs: int = 1, extra=()) -> Dataset:
    name = f"clean_{target}_{'train' if stage == _TRAIN else 'test'}_{n}x{tccs}" + "".join(f"_{e}" for e in extra)
    seed = derive_seed(spec.seed, stage, _target_key(target), n, tccs, *extra)
    cfg = sim_config_for(target)
    return cache.dataset(name, lambda: generate_clean(cfg, n, tccs, np.random.default_rng(seed)))


def _noisy(clean: Dataset, spec: ExperimentSpec, stage: int, target: str, sigma: float, extra=()) -> Dataset:
    seed = derive_seed(spec.seed, stage, _target_key(target), _sigma_key(sigma), *extra)
    return add_noise(clean, sigma, np.random.default_rng(seed))


def _train_nn(train: Dataset, target: str, spec: ExperimentSpec, keys: Tuple[int, ...]) -> nn.MlpModel:
    model = nn.init_model(np.random.default_rng(derive_seed(spec.seed, _NN_INIT, *keys)), train.grid.n_samples)
    cfg = nn.TrainConfig(
        target=target,
        n_iterations=spec.iterations_for(len(train)),
        rng_seed=derive_seed(spec.seed, _NN_TRAIN, *keys),
    )
    model, trace = nn.train(model, train, cfg)
    logger.info("event=nn_trained target=%s iterations=%d final_loss=%.6g", target, cfg.n_iterations,
                float(np.mean(trace[-50:])))
    return model


def _row(method, target, sigma, n_aifs, tccs, augmented, res: metrics.EvalResult, lam, runtime, spec) -> ResultRow:
    return ResultRow(method, target, float(sigma), int(n_aifs), int(tccs), bool(augmented), float(res.mad),
                     float(res.optimal_scale), lam, runtime if spec.record_runtime else None)


def run_noise_sweep(spec: ExperimentSpec, out_dir: Optional[str] = None,
                    on_row: Optional[Callable[[ResultRow], None]] = None) -> List[ResultRow]:
    """Deconvolution vs network at every noise level, for every target.

    Writes ``results.csv`` (updated after every row) and per-level scatter
    CSVs when ``out_dir`` is given.
    """
    if spec.kind != "noise_sweep":
        raise ConfigError("run_noise_sweep needs kind = noise_sweep")
    cache = StageCache(_stage_root(spec, out_dir))
    rows: List[ResultRow] = []

    def emit(row):
        rows.append(row)
        if on_row:
            on_row(row)
        if out_dir:
            write_results(os.path.join(out_dir, "results.csv"), rows)

    for target in spec.targets:
        tk = _target_key(target)
        clean_train = _clean_set(cache, spec, target, _TRAIN, spec.train_size)
        clean_test = _clean_set(cache, spec, target, _TEST, spec.test_size)
        truths = clean_test.target(target)
        for sigma in spec.sigmas:
            train = _noisy(clean_train, spec, _TRAIN_NOISE, target, sigma)
            test = _noisy(clean_test, spec, _TEST_NOISE, target, sigma)
            tag = f"{target}_s{sigma:g}"

            t_start = time.perf_counter()
            lam = cache.record(f"lambda_{tag}", lambda: {"lambda_rel": deconv.tune_lambda(
                train, target, max_samples=spec.lambda_samples,
                seed=derive_seed(spec.seed, _LAMBDA, tk, _sigma_key(sigma)))})["lambda_rel"]
            est = deconv.estimate(test, target, [lam])[:, 0]
            res = metrics.evaluate(est, truths, target)
            emit(_row("deconv", target, sigma, spec.train_size, 1, False, res, lam,
                      time.perf_counter() - t_start, spec))
            if out_dir:
                write_scatter(os.path.join(out_dir, f"scatter_deconv_{tag}.csv"), truths, est,
                              method="deconv", target=target, sigma=sigma, scale=res.optimal_scale)
            logger.info("event=result method=deconv target=%s sigma=%g lambda_rel=%g mad=%.6g",
                        target, sigma, lam, res.mad)

            t_start = time.perf_counter()
            model = cache.model(f"nn_{tag}", lambda: _train_nn(train, target, spec, (tk, _sigma_key(sigma))))
            pred = nn.predict_dataset(model, test)
            res = metrics.evaluate(pred, truths, target)
            emit(_row("nn", target, sigma, spec.train_size, 1, False, res, None,
                      time.perf_counter() - t_start, spec))
            if out_dir:
                write_scatter(os.path.join(out_dir, f"scatter_nn_{tag}.csv"), truths, pred,
                              method="nn", target=target, sigma=sigma, scale=res.optimal_scale)
            logger.info("event=result method=nn target=%s sigma=%g mad=%.6g", target, sigma, res.mad)
    return rows


def run_data_size(spec: ExperimentSpec, out_dir: Optional[str] = None, sigma: float = 1.0,
                  on_row: Optional[Callable[[ResultRow], None]] = None) -> List[ResultRow]:
    """Network accuracy for each (n_aifs, tccs_per_aif) cell, with and without augmentation.

    Every run uses the same iteration budget, cycling epochs over small sets.
    """
    if spec.kind != "data_size":
        raise ConfigError("run_data_size needs kind = data_size")
    cache = StageCache(_stage_root(spec, out_dir))
    aug_cfg = spec.augment or AugmentConfig()
    rows: List[ResultRow] = []

    def emit(row):
        rows.append(row)
        if on_row:
            on_row(row)
        if out_dir:
            write_results(os.path.join(out_dir, "results.csv"), rows)

    for target in spec.targets:
        tk = _target_key(target)
        clean_test = _clean_set(cache, spec, target, _TEST, spec.test_size)
        test = _noisy(clean_test, spec, _TEST_NOISE, target, sigma)
        truths = test.target(target)
        for n_aifs, tccs in spec.size_grid:
            clean = _clean_set(cache, spec, target, _TRAIN, n_aifs, tccs)
            train = _noisy(clean, spec, _TRAIN_NOISE, target, sigma, (n_aifs, tccs))
            for augmented in (False, True):
                t_start = time.perf_counter()
                keys = (tk, n_aifs, tccs, int(augmented))
                if augmented:
                    cfg = dataclasses.replace(aug_cfg, rng_seed=derive_seed(spec.seed, _AUGMENT, *keys))
                    data = expand_dataset(train, cfg)
                else:
                    data = train
                fixed = dataclasses.replace(spec, nn_epochs=None)
                tag = f"{target}_{n_aifs}x{tccs}_{'aug' if augmented else 'plain'}"
                model = cache.model(f"nn_{tag}", lambda: _train_nn(data, target, fixed, keys))
                pred = nn.predict_dataset(model, test)
                res = metrics.evaluate(pred, truths, target)
                emit(_row("nn", target, sigma, n_aifs, tccs, augmented, res, None,
                          time.perf_counter() - t_start, spec))
                logger.info("event=result method=nn target=%s n_aifs=%d tccs_per_aif=%d augmented=%s mad=%.6g",
                            target, n_aifs, tccs, augmented, res.mad)
    return rows


# ---------------------------------------------------------------- config files

def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _size_grid(text: str) -> Tuple[Tuple[int, int], ...]:
    cells = []
    for item in text.replace(",", " ").split():
        a, t = item.lower().split("x")
        cells.append((int(a), int(t)))
    return tuple(cells)


def load_spec(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
              kind: Optional[str] = None) -> ExperimentSpec:
    """Build an ExperimentSpec from an INI file plus ``key -> text`` overrides.

    Recognized sections/keys::

        [experiment]  kind, profile, targets, sigmas, size_grid, train_size,
                      test_size, nn_epochs, nn_iterations, seed, lambda_samples
        [augment]     shift_range, scale_range, factor
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        parser.read(path)
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    aug = dict(parser["augment"]) if parser.has_section("augment") else {}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k.startswith("augment."):
            aug[k.split(".", 1)[1]] = v
        else:
            exp[k] = v
    if kind:
        exp["kind"] = kind

    values = {}
    profile = exp.pop("profile", None) or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    values.update(PROFILES[profile])
    if profile == "desk" and exp.get("kind", "noise_sweep") == "noise_sweep":
        values["nn_iterations"] = DESK_SWEEP_ITERATIONS
    parsers = {
        "kind": str,
        "targets": lambda s: tuple(x for x in s.replace(",", " ").split()),
        "sigmas": _floats,
        "size_grid": _size_grid,
        "train_size": int,
        "test_size": int,
        "nn_epochs": lambda s: None if s.lower() in ("", "none") else int(s),
        "nn_iterations": int,
        "seed": int,
        "lambda_samples": int,
        "record_runtime": lambda s: s.lower() in ("1", "true", "yes"),
    }
    for k, v in exp.items():
        if k not in parsers:
            raise ConfigError(f"unknown experiment key {k!r}")
        values[k] = parsers[k](str(v))
    if aug:
        base = AugmentConfig()
        conv = {"shift_range": _ints, "scale_range": _floats, "factor": int}
        kw = {}
        for k, v in aug.items():
            if k not in conv:
                raise ConfigError(f"unknown augment key {k!r}")
            kw[k] = conv[k](str(v))
        values["augment"] = dataclasses.replace(base, **kw)
    return ExperimentSpec(**values)
