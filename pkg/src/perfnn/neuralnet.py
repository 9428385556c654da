"""Two-hidden-layer PReLU regression network with manual backprop.

Architecture: ``concat(aif, tcc) / input_scale -> 30 (PReLU) -> 30 (PReLU) -> 1``.
Trained on the mean absolute error with SGD and Nesterov momentum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .simulate import ConfigError, Dataset

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "a1", "W2", "b2", "a2", "Wo", "bo")
INPUT_SCALE = 100.0
AIF_SCALE = 100.0
# TCC enhancement is roughly 30x smaller than the AIF; dividing it by 100 as
# well leaves the tissue inputs too small for the first layer to use.
TCC_SCALE = 3.0
HIDDEN = 30
PRELU_INIT = 0.25


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass
class MlpModel:
    params: Dict[str, np.ndarray]
    input_dim: int
    input_scale: Union[float, np.ndarray] = INPUT_SCALE
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MlpModel":
        return MlpModel(
            {k: v.copy() for k, v in self.params.items()},
            self.input_dim,
            np.copy(self.input_scale) if np.ndim(self.input_scale) else self.input_scale,
            {k: v.copy() for k, v in self.velocity.items()},
        )

    @property
    def n_samples(self) -> int:
        return self.input_dim // 2


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 2048
    n_iterations: int = 488
    rng_seed: int = 0
    target: str = "cbf"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.target not in ("cbf", "tmax"):
            raise ConfigError(f"unknown target {self.target!r}")


def init_model(rng: np.random.Generator, n_samples: int = 19, hidden: int = HIDDEN) -> MlpModel:
    """Uniform fan-in/fan-out weights, zero biases, PReLU slopes 0.25."""
    dims = [(2 * n_samples, hidden), (hidden, hidden), (hidden, 1)]
    params = {}
    for (fan_in, fan_out), w, b in zip(dims, ("W1", "W2", "Wo"), ("b1", "b2", "bo")):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[w] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[b] = np.zeros(fan_out)
    params["a1"] = np.full(hidden, PRELU_INIT)
    params["a2"] = np.full(hidden, PRELU_INIT)
    return MlpModel(params, 2 * n_samples, default_input_scale(n_samples))


def default_input_scale(n_samples: int = 19) -> np.ndarray:
    return np.concatenate([np.full(n_samples, AIF_SCALE), np.full(n_samples, TCC_SCALE)])


def _inputs(model: MlpModel, aif, tcc) -> np.ndarray:
    aif = np.atleast_2d(np.asarray(aif, dtype=np.float64))
    tcc = np.atleast_2d(np.asarray(tcc, dtype=np.float64))
    if aif.shape != tcc.shape or 2 * aif.shape[-1] != model.input_dim:
        raise ConfigError(
            f"inputs of shape {aif.shape} and {tcc.shape} do not fit a model with input_dim {model.input_dim}"
        )
    return np.concatenate([aif, tcc], axis=1) / model.input_scale


def _prelu(z, a):
    return np.where(z > 0, z, a * z)


def _forward(p, x):
    z1 = x @ p["W1"] + p["b1"]
    h1 = _prelu(z1, p["a1"])
    z2 = h1 @ p["W2"] + p["b2"]
    h2 = _prelu(z2, p["a2"])
    y = h2 @ p["Wo"] + p["bo"]
    return y[:, 0], (x, z1, h1, z2, h2)


def forward(model: MlpModel, aif, tcc):
    """Network prediction for one sample (scalar) or a batch (vector)."""
    y, _ = _forward(model.params, _inputs(model, aif, tcc))
    return float(y[0]) if np.ndim(aif) == 1 else y


def loss(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("loss needs two non-empty vectors of equal length")
    return float(np.mean(np.abs(p - t)))


def _gradients(p, x, y) -> Tuple[float, Dict[str, np.ndarray]]:
    pred, (x, z1, h1, z2, h2) = _forward(p, x)
    diff = pred - y
    n = len(y)
    dy = (np.sign(diff) / n)[:, None]
    g = {"Wo": h2.T @ dy, "bo": dy.sum(axis=0)}
    dh2 = dy @ p["Wo"].T
    pos2 = z2 > 0
    g["a2"] = np.sum(np.where(pos2, 0.0, z2) * dh2, axis=0)
    dz2 = np.where(pos2, dh2, p["a2"] * dh2)
    g["W2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p["W2"].T
    pos1 = z1 > 0
    g["a1"] = np.sum(np.where(pos1, 0.0, z1) * dh1, axis=0)
    dz1 = np.where(pos1, dh1, p["a1"] * dh1)
    g["W1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return float(np.mean(np.abs(diff))), g


def backward(model: MlpModel, aif, tcc, truths) -> Tuple[float, Dict[str, np.ndarray]]:
    """Batch loss and its exact (sub)gradient for every parameter."""
    x = _inputs(model, aif, tcc)
    y = np.asarray(truths, dtype=np.float64).reshape(-1)
    if len(y) == 0 or len(y) != len(x):
        raise ValueError("batch must be non-empty with one truth per sample")
    return _gradients(model.params, x, y)


def nesterov_step(model: MlpModel, grad_fn: Callable, lr: float, momentum: float) -> float:
    """One update ``v <- mu*v - lr*grad(theta + mu*v); theta <- theta + v``.

    ``grad_fn`` maps a parameter dict to ``(loss, grads)``. Returns the loss at
    the look-ahead point.
    """
    p = model.params
    v = model.velocity
    for k in PARAM_NAMES:
        if k not in v:
            v[k] = np.zeros_like(p[k])
    ahead = {k: p[k] + momentum * v[k] for k in PARAM_NAMES}
    value, g = grad_fn(ahead)
    for k in PARAM_NAMES:
        v[k] = momentum * v[k] - lr * g[k]
        p[k] = p[k] + v[k]
    return value


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of batches drawn from back-to-back seeded permutations.

    A batch larger than the dataset spans several permutations; when the
    dataset is larger, the tail of a permutation that cannot fill a batch
    is dropped.
    """
    buf = np.empty(0, dtype=np.int64)
    while True:
        if batch_size <= n:
            perm = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                yield perm[start : start + batch_size]
        else:
            while len(buf) < batch_size:
                buf = np.concatenate([buf, rng.permutation(n)])
            yield buf[:batch_size]
            buf = buf[batch_size:]


def train(
    model: MlpModel,
    dataset: Dataset,
    cfg: TrainConfig,
    augmenter: Optional[Callable] = None,
) -> Tuple[MlpModel, np.ndarray]:
    """Minibatch training; returns a new model and the per-iteration batch loss.

    ``augmenter(aif, tcc, rng) -> (aif, tcc)`` is applied to every drawn batch.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    model = model.copy()
    if 2 * dataset.grid.n_samples != model.input_dim:
        raise ConfigError("dataset grid does not match the model input size")
    shuffle_ss, aug_ss = np.random.SeedSequence(cfg.rng_seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    y_all = dataset.target(cfg.target)
    batches = batch_indices(len(dataset), cfg.batch_size, shuffle_rng)
    trace: List[float] = []
    for it in range(cfg.n_iterations):
        idx = next(batches)
        aif, tcc = dataset.aif[idx], dataset.tcc[idx]
        if augmenter is not None:
            aif, tcc = augmenter(aif, tcc, aug_rng)
        x = _inputs(model, aif, tcc)
        y = y_all[idx]
        value = nesterov_step(model, lambda p: _gradients(p, x, y), cfg.learning_rate, cfg.momentum)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at iteration {it}")
        trace.append(value)
    return model, np.asarray(trace)


def predict_dataset(model: MlpModel, dataset: Dataset, batch_size: int = 8192) -> np.ndarray:
    if len(dataset) == 0:
        return np.empty(0)
    if 2 * dataset.grid.n_samples != model.input_dim:
        raise ConfigError("dataset grid does not match the model input size")
    out = [forward(model, dataset.aif[s : s + batch_size], dataset.tcc[s : s + batch_size])
           for s in range(0, len(dataset), batch_size)]
    return np.concatenate(out)
