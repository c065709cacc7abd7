"""Byte-reproducible SVG figures drawn from the CSVs shipped alongside them."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

_RC = {"svg.hashsalt": "deeplm", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _figure(**kw):
    with plt.rc_context(_RC):
        return plt.subplots(**kw)


def auroc_curves(table: pd.DataFrame, path) -> Path:
    fig, ax = _figure(figsize=(6, 4))
    days = table["t_lm"] / 24.0
    for name, label in (("pi1", "LM-CR"), ("pi2", "Deep-LM-CR")):
        y = table[f"auroc_{name}"]
        if f"lo_{name}" in table:
            err = np.vstack([y - table[f"lo_{name}"], table[f"hi_{name}"] - y])
            ax.errorbar(days, y, yerr=np.clip(err, 0, None), marker="o", ms=3, capsize=2, label=label)
        else:
            ax.plot(days, y, marker="o", ms=3, label=label)
    ax.set_xlabel("landmark (days)")
    ax.set_ylabel("AUROC")
    ax.legend()
    return _save(fig, path)


def relative_increase(table: pd.DataFrame, path) -> Path:
    fig, ax = _figure(figsize=(6, 3.5))
    ax.plot(table["t_lm"] / 24.0, 100.0 * table["relative_increase"], marker="o", ms=3)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("landmark (days)")
    ax.set_ylabel("relative AUROC increase (%)")
    return _save(fig, path)


def cif_quartiles(traj: pd.DataFrame, path, threshold: float) -> Path:
    fig, ax = _figure(figsize=(6, 4))
    for q, g in traj.groupby("quartile"):
        for i, (_, seg) in enumerate(g.groupby("t_lm")):
            ax.plot(seg["t"] / 24.0, seg["cif"], color=f"C{int(q) - 1}", lw=1, label=f"Q{int(q)}" if i == 0 else None)
    ax.axhline(threshold, color="k", ls="--", lw=0.8)
    ax.set_xlabel("time (days)")
    ax.set_ylabel("CIF of infection")
    ax.legend()
    return _save(fig, path)


def heatmap(matrix: pd.DataFrame, path) -> Path:
    fig, ax = _figure(figsize=(8, 0.5 * len(matrix) + 1.5))
    vals = matrix.to_numpy(float)
    lim = np.nanmax(np.abs(vals)) if np.isfinite(vals).any() else 1.0
    im = ax.imshow(vals, aspect="auto", cmap="RdBu_r", vmin=-lim, vmax=lim, interpolation="nearest")
    ax.set_yticks(range(len(matrix)), matrix.index)
    cols = [float(c) for c in matrix.columns]
    step = max(1, len(cols) // 8)
    ax.set_xticks(range(0, len(cols), step), [f"{c / 24:g}" for c in cols[::step]])
    ax.set_xlabel("landmark (days)")
    fig.colorbar(im, ax=ax, label="relative AUROC change")
    return _save(fig, path)


def cluster_histograms(hist: pd.DataFrame, path) -> Path:
    days = sorted(hist["day"].unique())
    fig, axes = _figure(nrows=len(days), figsize=(7, 2.2 * len(days)), squeeze=False)
    for ax, day in zip(axes[:, 0], days):
        sub = hist[hist["day"] == day]
        for off, label, color in ((-0.2, 0, "C0"), (0.2, 1, "C3")):
            g = sub[sub["label"] == label].sort_values("class")
            total = max(g["count"].sum(), 1)
            ax.bar(g["class"] + off, g["count"] / total, width=0.4, color=color, label="infected" if label else "non-infected")
        ax.set_title(f"day {day}")
        ax.set_xticks(range(16))
    axes[0, 0].legend()
    axes[-1, 0].set_xlabel("condition class")
    return _save(fig, path)
