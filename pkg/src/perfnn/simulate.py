"""Synthetic CT-perfusion curves built from gamma variates.

Both the arterial input function (AIF) and the impulse response function
(IRF) are gamma variates. The tissue concentration curve (TCC) is their
causal convolution, evaluated by trapezoidal quadrature on a fine grid and
then point-sampled on the acquisition grid. Ground-truth CBF, Tmax and CBV
come from closed-form properties of the IRF.

Random draw order (for reproducibility):

1. ``generate_dataset`` splits its seed into a *parameter* stream and a
   *noise* stream with :class:`numpy.random.SeedSequence`.
2. Parameter stream: AIF ``t0``, ``alpha``, ``beta``, ``peak`` (one array each,
   ``n_aifs`` long), then IRF ``t0``, ``alpha``, ``beta``, ``cbv`` (one array
   each, ``n_aifs * tccs_per_aif`` long).
3. Noise stream: one standard normal block of shape ``(n, 2, n_samples)``;
   ``[:, 0]`` goes to the AIF, ``[:, 1]`` to the TCC.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import zeta

from .parallel import pmap

# ml blood per g tissue (brain)
TISSUE_DENSITY = 1.04
# ml/g/s -> ml/100g/min
CBF_UNIT_FACTOR = 6000.0

_CHUNK = 512


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes."""


@dataclass(frozen=True)
class AcquisitionGrid:
    n_samples: int = 19
    span: float = 40.0

    def __post_init__(self):
        if int(self.n_samples) != self.n_samples or self.n_samples < 2:
            raise ConfigError(f"n_samples must be an integer >= 2, got {self.n_samples}")
        if not self.span > 0:
            raise ConfigError(f"span must be positive, got {self.span}")

    @property
    def dt(self) -> float:
        return self.span / (self.n_samples - 1)

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_samples) * self.dt
        t[-1] = self.span
        return t


@dataclass(frozen=True)
class GammaParams:
    """Gamma variate ``amp * (t - t0)**alpha * exp(-(t - t0) / beta)``.

    Fields may be scalars or equally shaped arrays (a batch of curves).
    """

    t0: float
    alpha: float
    beta: float
    amp: float

    def __post_init__(self):
        if np.any(np.asarray(self.t0) < 0) or np.any(np.asarray(self.alpha) < 0):
            raise ConfigError("gamma variate needs t0 >= 0 and alpha >= 0")
        if np.any(np.asarray(self.beta) <= 0) or np.any(np.asarray(self.amp) <= 0):
            raise ConfigError("gamma variate needs beta > 0 and amp > 0")

    def __getitem__(self, idx) -> "GammaParams":
        return GammaParams(*(np.asarray(v)[idx] for v in dataclasses.astuple(self)))

    def __len__(self) -> int:
        return int(np.size(self.t0))


@dataclass(frozen=True)
class SimConfig:
    grid: AcquisitionGrid = field(default_factory=AcquisitionGrid)
    aif_t0_range: Tuple[float, float] = (0.0, 15.0)
    aif_alpha_range: Tuple[float, float] = (1.5, 3.5)
    aif_beta_range: Tuple[float, float] = (1.5, 3.5)
    aif_peak_range: Tuple[float, float] = (100.0, 500.0)
    irf_t0_range: Tuple[float, float] = (0.0, 10.0)
    irf_alpha_range: Tuple[float, float] = (0.0, 0.5)
    irf_beta_range: Tuple[float, float] = (2.5, 4.5)
    cbv_range: Tuple[float, float] = (0.001, 0.06)
    noise_sigma: float = 1.0
    rng_seed: int = 0
    fine_dt: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if lo > hi:
                    raise ConfigError(f"{f.name}: lower bound {lo} exceeds upper bound {hi}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not (0 < self.fine_dt <= self.grid.dt / 10):
            raise ConfigError(f"fine_dt must lie in (0, {self.grid.dt / 10}]")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


# CBV ranges used for the two estimation targets
CBF_CBV_RANGE = (0.001, 0.06)
TMAX_CBV_RANGE = (0.02, 0.06)


@dataclass(frozen=True)
class Sample:
    aif: np.ndarray
    tcc: np.ndarray
    cbf_true: float
    tmax_true: float
    cbv_true: float
    aif_id: int = 0


@dataclass
class Dataset:
    """Column-oriented collection of samples sharing one acquisition grid."""

    grid: AcquisitionGrid
    aif: np.ndarray
    tcc: np.ndarray
    cbf: np.ndarray
    tmax: np.ndarray
    cbv: np.ndarray
    aif_id: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        self.aif = np.asarray(self.aif, dtype=np.float64).reshape(-1, self.grid.n_samples)
        self.tcc = np.asarray(self.tcc, dtype=np.float64).reshape(-1, self.grid.n_samples)
        self.cbf = np.asarray(self.cbf, dtype=np.float64).reshape(-1)
        self.tmax = np.asarray(self.tmax, dtype=np.float64).reshape(-1)
        self.cbv = np.asarray(self.cbv, dtype=np.float64).reshape(-1)
        self.aif_id = np.asarray(self.aif_id, dtype=np.int64).reshape(-1)
        n = len(self.aif)
        if any(len(a) != n for a in (self.tcc, self.cbf, self.tmax, self.cbv, self.aif_id)):
            raise ConfigError("dataset columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.aif)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            aif=self.aif[i].copy(),
            tcc=self.tcc[i].copy(),
            cbf_true=float(self.cbf[i]),
            tmax_true=float(self.tmax[i]),
            cbv_true=float(self.cbv[i]),
            aif_id=int(self.aif_id[i]),
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return Dataset(
            self.grid, self.aif[idx], self.tcc[idx], self.cbf[idx], self.tmax[idx],
            self.cbv[idx], self.aif_id[idx], self.sigma,
        )

    def target(self, name: str) -> np.ndarray:
        name = name.lower()
        if name == "cbf":
            return self.cbf
        if name == "tmax":
            return self.tmax
        if name == "cbv":
            return self.cbv
        raise ConfigError(f"unknown target {name!r}")

    @classmethod
    def from_samples(cls, samples, grid: AcquisitionGrid, sigma: float = 0.0) -> "Dataset":
        samples = list(samples)
        return cls(
            grid,
            np.array([s.aif for s in samples]).reshape(-1, grid.n_samples),
            np.array([s.tcc for s in samples]).reshape(-1, grid.n_samples),
            [s.cbf_true for s in samples],
            [s.tmax_true for s in samples],
            [s.cbv_true for s in samples],
            [s.aif_id for s in samples],
            sigma,
        )


def gamma_variate(t, p: GammaParams):
    """Evaluate the gamma variate at ``t``; zero before onset.

    With ``alpha == 0`` the curve jumps to ``amp`` at ``t == t0``.
    """
    x = np.asarray(t, dtype=np.float64) - np.asarray(p.t0, dtype=np.float64)
    alpha = np.asarray(p.alpha, dtype=np.float64)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    val = p.amp * xs**alpha * np.exp(-xs / p.beta)
    out = np.where(pos, val, 0.0)
    out = np.where((x == 0) & (alpha == 0), p.amp * np.ones_like(out), out)
    return out if out.ndim else float(out)


def gamma_peak(p: GammaParams):
    """Location and height of the gamma variate maximum."""
    alpha = np.asarray(p.alpha, dtype=np.float64)
    ab = alpha * p.beta
    t_peak = p.t0 + ab
    # 0**0 == 1 so alpha == 0 gives value == amp
    value = p.amp * ab**alpha * np.exp(-alpha)
    if np.ndim(t_peak) == 0:
        return float(t_peak), float(value)
    return t_peak, value


def gamma_integral(p: GammaParams):
    """Area under the gamma variate, ``amp * beta**(alpha+1) * Gamma(alpha+1)``."""
    alpha = np.asarray(p.alpha, dtype=np.float64)
    area = p.amp * np.asarray(p.beta, dtype=np.float64) ** (alpha + 1) * gamma_fn(alpha + 1)
    return float(area) if np.ndim(area) == 0 else area


def _uniform(rng, bounds, size):
    lo, hi = bounds
    return rng.uniform(lo, hi, size)


def draw_aif(cfg: SimConfig, rng: np.random.Generator, size=None) -> GammaParams:
    """Random AIF whose maximum is uniform over ``cfg.aif_peak_range``."""
    t0 = _uniform(rng, cfg.aif_t0_range, size)
    alpha = _uniform(rng, cfg.aif_alpha_range, size)
    beta = _uniform(rng, cfg.aif_beta_range, size)
    peak = _uniform(rng, cfg.aif_peak_range, size)
    return aif_with_peak(t0, alpha, beta, peak)


def aif_with_peak(t0, alpha, beta, peak) -> GammaParams:
    _, unit_peak = gamma_peak(GammaParams(t0, alpha, beta, np.ones_like(np.asarray(peak, float))))
    return GammaParams(t0, alpha, beta, peak / unit_peak)


def draw_irf(cfg: SimConfig, rng: np.random.Generator, size=None) -> GammaParams:
    """Random IRF whose integral (the CBV) is uniform over ``cfg.cbv_range``."""
    t0 = _uniform(rng, cfg.irf_t0_range, size)
    alpha = _uniform(rng, cfg.irf_alpha_range, size)
    beta = _uniform(rng, cfg.irf_beta_range, size)
    cbv = _uniform(rng, cfg.cbv_range, size)
    return irf_with_cbv(t0, alpha, beta, cbv)


def irf_with_cbv(t0, alpha, beta, cbv) -> GammaParams:
    unit = gamma_integral(GammaParams(t0, alpha, beta, np.ones_like(np.asarray(cbv, float))))
    return GammaParams(t0, alpha, beta, cbv / unit)


def ground_truth(irf: GammaParams, rho: float = TISSUE_DENSITY):
    """(cbf, tmax, cbv) of an IRF; CBF in ml/100g/min."""
    tmax, peak = gamma_peak(irf)
    return peak / rho * CBF_UNIT_FACTOR, tmax, gamma_integral(irf)


def _steps_per_interval(grid: AcquisitionGrid, fine_dt: float, aif: GammaParams, irf: GammaParams):
    # the fine step also has to resolve very short decay constants
    step = np.minimum(fine_dt, np.minimum(np.asarray(irf.beta), np.asarray(aif.beta)) / 20.0)
    return np.ceil(grid.dt / step - 1e-9).astype(np.int64)


def _convolve_block(aif: GammaParams, irf: GammaParams, grid: AcquisitionGrid, m: int) -> np.ndarray:
    """TCC at grid times for a block of curves sharing ``m`` fine steps per grid step.

    The fine grid is anchored at the IRF onset so that ``(s - t0)**alpha``
    sits on a node; its leading singular error term is removed with the
    generalized Euler-Maclaurin (zeta) correction.
    """
    n = grid.n_samples
    h = grid.dt / m
    n_fine = (n - 1) * m + 1
    j = np.arange(n_fine) * h
    log_j = np.log(np.where(j > 0, j, 1.0))

    a_alpha = np.asarray(irf.alpha, dtype=np.float64)[:, None]
    irf_fine = np.exp(a_alpha * log_j - j / np.asarray(irf.beta)[:, None])
    irf_fine[:, 0] = np.where(a_alpha[:, 0] == 0, 1.0, 0.0)
    irf_fine *= np.asarray(irf.amp)[:, None]

    # aif_fine[k] = aif(k*h - irf.t0)
    x = j[None, :] - (np.asarray(irf.t0) + np.asarray(aif.t0))[:, None]
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    aif_fine = np.where(
        pos,
        np.exp(np.asarray(aif.alpha)[:, None] * np.log(xs) - xs / np.asarray(aif.beta)[:, None]),
        0.0,
    )
    aif_fine *= np.asarray(aif.amp)[:, None]

    out = np.empty((len(irf), n))
    for i in range(n):
        k = i * m
        out[:, i] = np.einsum("bj,bj->b", irf_fine[:, : k + 1], aif_fine[:, k::-1])
        end = aif_fine[:, k] * irf.amp
        alpha = a_alpha[:, 0]
        corr = np.where(alpha == 0, 0.5, zeta(-alpha) * h**alpha)
        out[:, i] -= corr * end
    return out * h


def convolve_on_grid(aif: GammaParams, irf: GammaParams, grid: AcquisitionGrid, fine_dt: float) -> np.ndarray:
    """Noise-free TCC (shape ``(len(irf), n_samples)``) for paired AIF/IRF batches."""
    aif = GammaParams(*np.broadcast_arrays(*(np.atleast_1d(v) for v in dataclasses.astuple(aif))))
    irf = GammaParams(*np.broadcast_arrays(*(np.atleast_1d(v) for v in dataclasses.astuple(irf))))
    if len(aif) != len(irf):
        raise ConfigError("AIF and IRF batches differ in length")
    steps = _steps_per_interval(grid, fine_dt, aif, irf)
    out = np.empty((len(irf), grid.n_samples))
    blocks = []
    for m in np.unique(steps):
        idx = np.flatnonzero(steps == m)
        blocks += [(int(m), idx[s : s + _CHUNK]) for s in range(0, len(idx), _CHUNK)]

    def work(block):
        m, sel = block
        out[sel] = _convolve_block(aif[sel], irf[sel], grid, m)

    pmap(work, blocks)
    return out


def synthesize_sample(
    aif: GammaParams, irf: GammaParams, cfg: SimConfig, rng: Optional[np.random.Generator] = None,
    aif_id: int = 0,
) -> Sample:
    """Sample one AIF/TCC pair on the acquisition grid and add Gaussian noise."""
    t = cfg.grid.times
    aif_clean = gamma_variate(t, aif)
    tcc_clean = convolve_on_grid(aif, irf, cfg.grid, cfg.fine_dt)[0]
    if cfg.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(2, cfg.grid.n_samples))
        aif_clean = aif_clean + noise[0]
        tcc_clean = tcc_clean + noise[1]
    cbf, tmax, cbv = ground_truth(irf)
    return Sample(aif_clean, tcc_clean, float(cbf), float(tmax), float(cbv), aif_id)


def generate_clean(cfg: SimConfig, n_aifs: int, tccs_per_aif: int, rng: np.random.Generator) -> Dataset:
    """Noise-free dataset; ``n_aifs`` AIFs, each shared by ``tccs_per_aif`` IRFs."""
    if n_aifs < 1 or tccs_per_aif < 1:
        raise ConfigError("n_aifs and tccs_per_aif must be >= 1")
    aifs = draw_aif(cfg, rng, size=n_aifs)
    irfs = draw_irf(cfg, rng, size=n_aifs * tccs_per_aif)
    aif_id = np.repeat(np.arange(n_aifs), tccs_per_aif)
    per_sample_aif = aifs[aif_id]
    t = cfg.grid.times
    aif_curves = gamma_variate(t[None, :], GammaParams(*(np.asarray(v)[:, None] for v in dataclasses.astuple(per_sample_aif))))
    tcc_curves = convolve_on_grid(per_sample_aif, irfs, cfg.grid, cfg.fine_dt)
    cbf, tmax, cbv = ground_truth(irfs)
    return Dataset(cfg.grid, aif_curves, tcc_curves, cbf, tmax, cbv, aif_id, sigma=0.0)


def add_noise(ds: Dataset, sigma: float, rng: np.random.Generator) -> Dataset:
    """Independent N(0, sigma^2) noise on every AIF and TCC point."""
    noise = rng.standard_normal(size=(len(ds), 2, ds.grid.n_samples)) * sigma
    return Dataset(ds.grid, ds.aif + noise[:, 0], ds.tcc + noise[:, 1], ds.cbf, ds.tmax, ds.cbv, ds.aif_id, sigma)


def dataset_streams(seed) -> Tuple[np.random.Generator, np.random.Generator]:
    """Parameter and noise generators derived from one dataset seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    params_ss, noise_ss = ss.spawn(2)
    return np.random.default_rng(params_ss), np.random.default_rng(noise_ss)


def generate_dataset(cfg: SimConfig, n_aifs: int, tccs_per_aif: int = 1, seed=None) -> Dataset:
    """Draw a full noisy dataset. ``seed`` defaults to ``cfg.rng_seed``."""
    params_rng, noise_rng = dataset_streams(cfg.rng_seed if seed is None else seed)
    clean = generate_clean(cfg, n_aifs, tccs_per_aif, params_rng)
    return add_noise(clean, cfg.noise_sigma, noise_rng)
