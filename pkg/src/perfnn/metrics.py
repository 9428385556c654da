"""Evaluation metrics: mean absolute difference, optionally after L1-optimal rescaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    mad: float
    optimal_scale: float
    n: int


def _pair(estimates, truths):
    e = np.asarray(estimates, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: {e.size} estimates vs {t.size} truths")
    if e.size == 0:
        raise ValueError("empty input")
    return e, t


def mad(estimates, truths) -> float:
    e, t = _pair(estimates, truths)
    return float(np.mean(np.abs(e - t)))


def l1_objective(scale, estimates, truths) -> float:
    e, t = _pair(estimates, truths)
    return float(np.sum(np.abs(scale * e - t)))


def optimal_scale(estimates, truths) -> float:
    """Scale ``s`` minimizing ``sum |s*e - t|``.

    The objective equals ``sum |e_i| * |s - t_i/e_i|``, so the minimizer is the
    weighted median of the ratios with weights ``|e_i|`` (lower median on ties).
    """
    e, t = _pair(estimates, truths)
    nz = e != 0
    if not nz.any():
        raise ValueError("optimal scale undefined: all estimates are zero")
    ratio = t[nz] / e[nz]
    weight = np.abs(e[nz])
    order = np.argsort(ratio, kind="stable")
    cum = np.cumsum(weight[order])
    k = np.searchsorted(cum, 0.5 * cum[-1], side="left")
    return float(ratio[order][k])


def scaled_cbf_mad(estimates, truths) -> EvalResult:
    e, t = _pair(estimates, truths)
    s = optimal_scale(e, t)
    return EvalResult(mad(s * e, t), s, e.size)


def tmax_mad(estimates, truths) -> EvalResult:
    e, t = _pair(estimates, truths)
    return EvalResult(mad(e, t), 1.0, e.size)


def evaluate(estimates, truths, target: str) -> EvalResult:
    if target == "cbf":
        return scaled_cbf_mad(estimates, truths)
    if target == "tmax":
        return tmax_mad(estimates, truths)
    raise ValueError(f"unknown target {target!r}")
