"""Matplotlib figures rendered next to the delimited outputs.

Each function writes one PNG and returns its path.  Figures mirror the
CSV diagnostics: index paths, correlation decay by gap, residual
variance by gap, and normal quantile plots of ZIP effects.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import GapCorrelationRow, GapVarianceRow, IndexSeries, QuantileRow

__all__ = [
    "plot_indices",
    "plot_correlation_by_gap",
    "plot_variance_by_gap",
    "plot_effect_quantiles",
]

SMALL_CELL = 20  # pair-count threshold below which a cell is drawn hollow


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_indices(indices: Mapping[str, IndexSeries], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label in sorted(indices):
        series = indices[label]
        ax.plot(np.arange(1, series.T + 1), series.values, label=label, lw=1.4)
    ax.set_xlabel("quarter")
    ax.set_ylabel("index (first quarter = 1)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_correlation_by_gap(
    rows: Sequence[GapCorrelationRow], phi: float | None, path
) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    big = [r for r in rows if r.n_pairs >= SMALL_CELL]
    small = [r for r in rows if r.n_pairs < SMALL_CELL]
    if big:
        ax.plot([r.gap for r in big], [r.correlation for r in big], "o", ms=4,
                label=f">= {SMALL_CELL} pairs")
    if small:
        ax.plot([r.gap for r in small], [r.correlation for r in small], "^", ms=5,
                mfc="none", label=f"< {SMALL_CELL} pairs")
    if phi is not None and rows:
        gaps = np.arange(1, max(r.gap for r in rows) + 1)
        ax.plot(gaps, phi**gaps, "-", lw=1.2, label="phi^gap")
    ax.set_xlabel("gap (quarters)")
    ax.set_ylabel("correlation of adjusted log prices")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_variance_by_gap(rows: Sequence[GapVarianceRow], label: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    gaps = [r.gap for r in rows]
    ax.plot(gaps, [r.empirical for r in rows], "o", ms=4, label="empirical")
    ax.plot(gaps, [r.expected for r in rows], "-", lw=1.2, label="model")
    ax.set_xlabel("gap (quarters)")
    ax.set_ylabel("residual variance")
    ax.set_title(label)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_effect_quantiles(rows: Sequence[QuantileRow], label: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    big = [r for r in rows if r.group_size > 10]
    small = [r for r in rows if r.group_size <= 10]
    if big:
        ax.plot([r.quantile for r in big], [r.effect for r in big], "o", ms=4,
                label="> 10 sales")
    if small:
        ax.plot([r.quantile for r in small], [r.effect for r in small], "^", ms=5,
                mfc="none", label="<= 10 sales")
    ax.set_xlabel("standard normal quantile")
    ax.set_ylabel("fitted effect")
    ax.set_title(label)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
