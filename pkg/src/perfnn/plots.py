"""SVG figures from result and scatter CSVs (presentation only)."""
from __future__ import annotations

import os
from collections import defaultdict
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import ResultRow, read_scatter  # noqa: E402

# fixed ids and no timestamp -> byte-identical SVGs
plt.rcParams["svg.hashsalt"] = "perfnn"
_SAVE = {"format": "svg", "metadata": {"Date": None}}

_LABELS = {"cbf": "CBF MAD (ml/100g/min, scaled)", "tmax": "Tmax MAD (s)"}


def _save(fig, path):
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_noise_sweep(rows: Sequence[ResultRow], target: str, path: str) -> str:
    rows = [r for r in rows if r.target == target]
    by_method = defaultdict(list)
    for r in rows:
        by_method[r.method].append(r)
    for method in ("nn", "deconv"):
        if not by_method.get(method):
            raise ValueError(f"no results for method {method!r} (target {target})")
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, label in (("deconv", "SVD deconvolution"), ("nn", "neural network")):
        pts = sorted(by_method[method], key=lambda r: r.sigma)
        ax.plot([r.sigma for r in pts], [r.mad for r in pts], marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("noise sigma (HU)")
    ax.set_ylabel(_LABELS[target])
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_data_size(rows: Sequence[ResultRow], target: str, path: str) -> str:
    rows = [r for r in rows if r.target == target and r.method == "nn"]
    if not rows:
        raise ValueError(f"no results for method 'nn' (target {target})")
    fig, ax = plt.subplots(figsize=(5, 4))
    groups = defaultdict(list)
    for r in rows:
        groups[(r.tccs_per_aif, r.augmented)].append(r)
    for (tccs, augmented), pts in sorted(groups.items()):
        pts = sorted(pts, key=lambda r: r.n_aifs)
        ax.plot([r.n_aifs for r in pts], [r.mad for r in pts], marker="o",
                linestyle="-" if augmented else "--",
                label=f"{tccs} TCC/AIF{' + aug' if augmented else ''}")
    ax.set_xscale("log")
    ax.set_xlabel("number of AIFs (acquisitions)")
    ax.set_ylabel(_LABELS[target])
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_scatter(scatter_csv: str, path: str) -> str:
    meta, truth, est = read_scatter(scatter_csv)
    est = est * float(meta.get("optimal_scale", 1.0))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(truth, est, s=2, alpha=0.3)
    lo, hi = float(min(truth.min(), est.min())), float(max(truth.max(), est.max()))
    ax.plot([lo, hi], [lo, hi], color="k", linewidth=0.8)
    ax.set_xlabel("true")
    ax.set_ylabel("estimated")
    ax.set_title(f"{meta.get('method')} {meta.get('target')} sigma={meta.get('sigma')}")
    fig.tight_layout()
    return _save(fig, path)


def plot_histograms(ds, path: str) -> str:
    """Simulated CBF, CBV, MTT (= CBV/CBF) and Tmax distributions."""
    cbf_ml_g_s = ds.cbf / 6000.0
    mtt = ds.cbv / cbf_ml_g_s
    fig, axes = plt.subplots(1, 4, figsize=(12, 3))
    for ax, values, label in zip(axes, (ds.cbf, ds.cbv * 100, mtt, ds.tmax),
                                 ("CBF (ml/100g/min)", "CBV (%)", "MTT (s)", "Tmax (s)")):
        ax.hist(values, bins=50)
        ax.set_xlabel(label)
    fig.tight_layout()
    return _save(fig, path)


def render_plots(rows: Sequence[ResultRow], out_dir: str, kind: str = None, scatter_dir: str = None) -> List[str]:
    """Write one figure per target, plus one per scatter CSV found in ``scatter_dir``.

    ``kind`` is ``"noise_sweep"`` or ``"data_size"``; by default it is
    inferred from whether any deconvolution rows are present.
    """
    if not rows:
        raise ValueError("no results to plot")
    if kind is None:
        kind = "noise_sweep" if any(r.method == "deconv" for r in rows) else "data_size"
    os.makedirs(out_dir, exist_ok=True)
    plot = plot_noise_sweep if kind == "noise_sweep" else plot_data_size
    written = [plot(rows, t, os.path.join(out_dir, f"{kind}_{t}.svg")) for t in sorted({r.target for r in rows})]
    if scatter_dir and os.path.isdir(scatter_dir):
        for name in sorted(os.listdir(scatter_dir)):
            if name.startswith("scatter_") and name.endswith(".csv"):
                written.append(plot_scatter(os.path.join(scatter_dir, name),
                                            os.path.join(out_dir, name[:-4] + ".svg")))
    return written
