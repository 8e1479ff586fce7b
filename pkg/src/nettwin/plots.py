"""Static figures for finished run directories (Agg backend, files only)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_gap_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _series(rows: Sequence[Mapping], key: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([int(r["arrival_seq"]) for r in rows])
    y = np.asarray([float(r[key]) if r[key] not in ("", None) else np.nan for r in rows])
    return x, y


def plot_gap_curves(runs: Mapping[str, Sequence[Mapping]], path, title: str | None = None) -> Path:
    """Gap-vs-arrival curves, IND on the left and OOD on the right, one line per run."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8), sharex=True)
    for label, rows in runs.items():
        for ax, key in zip(axes, ("gap_ind_db", "gap_ood_db")):
            x, y = _series(rows, key)
            ax.plot(x, y, label=label, lw=1.4)
    for ax, name in zip(axes, ("IND", "OOD")):
        ax.set_xlabel("arrivals")
        ax.set_ylabel(f"{name} twin-to-real gap (dB)")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_cdf(errors: Mapping[str, np.ndarray], path, title: str | None = None) -> Path:
    """Empirical CDF of per-point absolute error for each split."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    for label, err in errors.items():
        err = np.sort(np.asarray(err, float))
        if len(err):
            ax.step(err, np.arange(1, len(err) + 1) / len(err), where="post", label=label)
    ax.set_xlabel("absolute error (dB)")
    ax.set_ylabel("fraction of points")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
