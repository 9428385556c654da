"""Shift/scale augmentation that leaves the impulse response untouched.

Delaying or advancing the bolus shifts AIF and TCC together; changing the
contrast concentration scales both. Neither changes CBF, Tmax or CBV.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .simulate import ConfigError, Dataset, Sample


@dataclass(frozen=True)
class AugmentConfig:
    shift_range: Tuple[int, int] = (-1, 2)
    scale_range: Tuple[float, float] = (0.7, 1.3)
    factor: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.shift_range
        if int(lo) != lo or int(hi) != hi or lo > hi:
            raise ConfigError("shift_range must be integers with lo <= hi")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")
        if self.factor < 1:
            raise ConfigError("factor must be >= 1")


def shift_curve(curve, k: int) -> np.ndarray:
    """Delay (k > 0) or advance (k < 0) by whole time points.

    Vacated leading points are zero (no contrast yet); vacated trailing
    points hold the last value. Works row-wise on 2-D input.
    """
    curve = np.asarray(curve, dtype=np.float64)
    n = curve.shape[-1]
    k = int(k)
    if abs(k) >= n:
        raise ConfigError(f"shift {k} out of range for {n} points")
    if k == 0:
        return curve.copy()
    out = np.empty_like(curve)
    if k > 0:
        out[..., :k] = 0.0
        out[..., k:] = curve[..., : n - k]
    else:
        out[..., : n + k] = curve[..., -k:]
        out[..., n + k :] = curve[..., -1:]
    return out


def _draw(cfg: AugmentConfig, rng: np.random.Generator, size):
    lo, hi = cfg.shift_range
    k = rng.integers(lo, hi, size=size, endpoint=True)
    c = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=size)
    return k, c


def apply_batch(aif, tcc, shifts, scales) -> Tuple[np.ndarray, np.ndarray]:
    aif = np.asarray(aif, dtype=np.float64)
    tcc = np.asarray(tcc, dtype=np.float64)
    out_aif = np.empty_like(aif)
    out_tcc = np.empty_like(tcc)
    for k in np.unique(shifts):
        sel = shifts == k
        out_aif[sel] = shift_curve(aif[sel], k)
        out_tcc[sel] = shift_curve(tcc[sel], k)
    c = np.asarray(scales)[:, None]
    return c * out_aif, c * out_tcc


def augment_batch(aif, tcc, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Independent shift/scale draw for each row; usable as a training augmenter."""
    k, c = _draw(cfg, rng, len(aif))
    return apply_batch(aif, tcc, k, c)


def augment_sample(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    k, c = _draw(cfg, rng, None)
    return replace(s, aif=c * shift_curve(s.aif, k), tcc=c * shift_curve(s.tcc, k))


def expand_dataset(d: Dataset, cfg: AugmentConfig) -> Dataset:
    """``cfg.factor`` augmented copies per sample (originals not kept).

    Copies of sample ``i`` occupy rows ``i*factor .. i*factor + factor - 1``.
    """
    if len(d) == 0:
        raise ConfigError("cannot expand an empty dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    idx = np.repeat(np.arange(len(d)), cfg.factor)
    k, c = _draw(cfg, rng, len(idx))
    aif, tcc = apply_batch(d.aif[idx], d.tcc[idx], k, c)
    return Dataset(d.grid, aif, tcc, d.cbf[idx], d.tmax[idx], d.cbv[idx], d.aif_id[idx], d.sigma)
