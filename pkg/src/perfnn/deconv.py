"""Tikhonov-regularized SVD deconvolution with a trapezoidal Volterra matrix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metrics import mad, scaled_cbf_mad
from .simulate import CBF_UNIT_FACTOR, TISSUE_DENSITY, AcquisitionGrid, ConfigError, Dataset

# 0.01 * 2**k, k = 0..9
LAMBDA_GRID = tuple(0.01 * 2.0**k for k in range(10))


class DegenerateInputError(ValueError):
    """Deconvolution of an all-zero AIF."""


@dataclass(frozen=True)
class DeconvConfig:
    lambda_rel: float = 0.1
    grid: AcquisitionGrid = AcquisitionGrid()
    spline_refine: bool = True

    def __post_init__(self):
        if not self.lambda_rel > 0:
            raise ConfigError("lambda_rel must be positive")


@dataclass(frozen=True)
class Irf:
    values: np.ndarray
    grid: AcquisitionGrid

    def __post_init__(self):
        if np.shape(self.values)[-1] != self.grid.n_samples:
            raise ConfigError("IRF length does not match the grid")


def build_volterra_matrix(aif, grid: AcquisitionGrid) -> np.ndarray:
    """Lower-triangular convolution matrix, ``M[i, j] = dt * w_ij * aif[i - j]``.

    ``w_ij`` is 1/2 on the first column and the diagonal, 1 elsewhere.
    Accepts a single AIF or a stack of shape ``(..., n)``.
    """
    aif = np.asarray(aif, dtype=np.float64)
    n = grid.n_samples
    if aif.shape[-1] != n:
        raise ConfigError(f"AIF has {aif.shape[-1]} points, grid has {n}")
    i, j = np.indices((n, n))
    lower = j <= i
    w = np.where((j == 0) | (j == i), 0.5, 1.0) * lower
    lag = np.where(lower, i - j, 0)
    return grid.dt * w * aif[..., lag]


def tikhonov_filter(s, lam):
    """Filter factors ``s^2 / (s^2 + lam^2)``; exactly 1 when ``lam == 0``."""
    s = np.asarray(s, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    s2 = s * s
    with np.errstate(invalid="ignore"):
        f = s2 / (s2 + lam * lam)
    return np.where(lam == 0, 1.0, f)


def _filtered_inverse(u, s, vt, tcc, lambda_rel):
    # h = V diag(f/s) U^T tcc, with f/s = s / (s^2 + lam^2)
    lam = np.asarray(lambda_rel, dtype=np.float64)[..., None] * s[..., :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(lam == 0, 1.0 / s, s / (s * s + lam * lam))
    gain = np.where(s > 0, gain, 0.0)
    coef = np.einsum("...ki,...k->...i", u, tcc)
    return np.einsum("...ki,...k->...i", vt, gain * coef)


def tikhonov_svd_solve(m: np.ndarray, tcc, lambda_rel: float, grid: Optional[AcquisitionGrid] = None) -> Irf:
    """Regularized solution of ``m @ h = tcc`` with ``lambda = lambda_rel * s_max``."""
    m = np.asarray(m, dtype=np.float64)
    u, s, vt = np.linalg.svd(m)
    if s[0] == 0:
        raise DegenerateInputError("AIF is identically zero")
    h = _filtered_inverse(u, s, vt, np.asarray(tcc, dtype=np.float64), lambda_rel)
    if grid is None:
        grid = AcquisitionGrid(len(h), (len(h) - 1) * 1.0)
    return Irf(h, grid)


def deconvolve(aif, tcc, grid: AcquisitionGrid, lambda_rels) -> np.ndarray:
    """Batch deconvolution.

    ``aif`` and ``tcc`` have shape ``(B, n)``; ``lambda_rels`` is a sequence of
    length ``L``. Returns IRFs of shape ``(B, L, n)``. Each SVD is computed once
    and reused across the whole lambda list.
    """
    aif = np.atleast_2d(aif)
    tcc = np.atleast_2d(tcc)
    mats = build_volterra_matrix(aif, grid)
    u, s, vt = np.linalg.svd(mats)
    if np.any(s[:, 0] == 0):
        raise DegenerateInputError("at least one AIF is identically zero")
    lam = np.asarray(lambda_rels, dtype=np.float64)
    return _filtered_inverse(
        u[:, None], s[:, None, :], vt[:, None], tcc[:, None, :], np.broadcast_to(lam, (len(aif), len(lam)))
    )


def estimate_cbf(irf, rho: float = TISSUE_DENSITY):
    """CBF in ml/100g/min from the discrete IRF maximum; negative peaks clamp to 0."""
    values = irf.values if isinstance(irf, Irf) else np.asarray(irf)
    peak = np.maximum(values.max(axis=-1), 0.0)
    out = peak / rho * CBF_UNIT_FACTOR
    return float(out) if np.ndim(out) == 0 else out


def estimate_tmax(irf, grid: Optional[AcquisitionGrid] = None, spline_refine: bool = True):
    """Time of the IRF maximum, refined by the parabola through the peak and its neighbours."""
    if isinstance(irf, Irf):
        values, grid = irf.values, irf.grid
    else:
        values = np.asarray(irf, dtype=np.float64)
    if grid is None:
        raise ConfigError("a grid is required for raw IRF arrays")
    lead_shape = np.shape(values)[:-1]
    values = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
    n = values.shape[-1]
    dt = grid.dt
    times = grid.times
    k = np.argmax(values, axis=-1)  # first index on ties
    out = times[k].astype(np.float64)
    if spline_refine:
        inner = (k > 0) & (k < n - 1)
        kk = np.clip(k, 1, n - 2)
        rows = np.arange(len(values))
        vm = values[rows, kk - 1]
        v0 = values[rows, kk]
        vp = values[rows, kk + 1]
        curv = vm - 2 * v0 + vp
        with np.errstate(divide="ignore", invalid="ignore"):
            offset = 0.5 * dt * (vm - vp) / curv
        offset = np.where(np.isfinite(offset) & (curv != 0), offset, 0.0)
        offset = np.clip(offset, -dt, dt)
        out = np.where(inner, times[kk] + offset, out)
    out = out.reshape(lead_shape)
    return float(out) if out.ndim == 0 else out


def score(estimates, truths, target: str) -> float:
    """Metric minimized during lambda tuning and reported at test time."""
    if target == "cbf":
        return scaled_cbf_mad(estimates, truths).mad
    if target == "tmax":
        return mad(estimates, truths)
    raise ConfigError(f"unknown target {target!r}")


def estimate(ds: Dataset, target: str, lambda_rels, spline_refine: bool = True) -> np.ndarray:
    """Per-sample estimates, shape ``(len(ds), len(lambda_rels))``."""
    irfs = deconvolve(ds.aif, ds.tcc, ds.grid, lambda_rels)
    if target == "cbf":
        return estimate_cbf(irfs)
    if target == "tmax":
        return estimate_tmax(irfs, ds.grid, spline_refine)
    raise ConfigError(f"unknown target {target!r}")


def tune_lambda(
    train: Dataset,
    target: str,
    lambdas: Sequence[float] = LAMBDA_GRID,
    max_samples: Optional[int] = 10_000,
    seed: int = 0,
    spline_refine: bool = True,
) -> float:
    """Grid-search lambda_rel on a training set; ties go to the smaller value.

    Sets larger than ``max_samples`` are subsampled with a seeded permutation.
    """
    if len(train) == 0:
        raise ConfigError("cannot tune lambda on an empty dataset")
    if max_samples is not None and len(train) > max_samples:
        idx = np.sort(np.random.default_rng(seed).permutation(len(train))[:max_samples])
        train = train.subset(idx)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    est = estimate(train, target, lambdas, spline_refine)
    truth = train.target(target)
    scores = np.array([score(est[:, k], truth, target) for k in range(len(lambdas))])
    best = scores.min()
    return float(lambdas[scores == best].min())
