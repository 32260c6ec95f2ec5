"""Diagnostics: mask polarization over time, cross-batch consistency, loss regression."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch import FLOPS_CONVENTION
from .errors import ContractError, RegressionUndefined

N_BINS = 20
POLARIZATION_BAND = (0.1, 0.9)


@dataclass
class PruneReport:
    flops_before: int
    flops_after: int
    flops_reduction: float
    params_before: int
    params_after: int
    baseline_acc: float
    pruned_acc: float
    finetuned_acc: float
    mask_polarization_fraction: float
    batch_consistency: float
    loss_regression: dict = field(default_factory=dict)
    flops_convention: str = FLOPS_CONVENTION
    consistency_metric: str = "mean pairwise Pearson correlation of per-batch masks"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flops_before > 0 and not math.isclose(
            self.flops_reduction, 1.0 - self.flops_after / self.flops_before, abs_tol=1e-12
        ):
            raise ContractError("flops_reduction disagrees with flops_before/after")
        for name in ("flops_reduction", "baseline_acc", "pruned_acc", "finetuned_acc",
                     "mask_polarization_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} is outside [0, 1]")
        c = self.batch_consistency
        if not (math.isnan(c) or -1.0 - 1e-12 <= c <= 1.0 + 1e-12):
            raise ContractError("batch_consistency must lie in [-1, 1]")

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "PruneReport":
        return cls(**json.loads(Path(path).read_text()))


def polarization_fraction(mask, band=POLARIZATION_BAND) -> float:
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    return float(np.mean((m < band[0]) | (m > band[1])))


def polarization_histogram(snapshots, bins: int = N_BINS) -> np.ndarray:
    """Counts per snapshot over ``bins`` equal bins of [0, 1]; shape ``(snapshots, bins)``."""
    rows = [np.asarray(s, dtype=np.float64).reshape(-1) for s in snapshots]
    if not rows:
        raise ContractError("need at least one snapshot")
    return np.stack([np.histogram(np.clip(r, 0.0, 1.0), bins=bins, range=(0.0, 1.0))[0] for r in rows])


@dataclass
class Consistency:
    mean_correlation: float
    correlation: np.ndarray  # row-by-row Pearson matrix, NaN for excluded rows
    heatmap: np.ndarray  # the batch x filter mask matrix itself
    excluded: int


def batch_consistency(mask_rows) -> Consistency:
    """Mean pairwise Pearson correlation between per-batch mask vectors.

    Constant rows have no defined correlation; they are excluded and counted.
    """
    X = np.asarray(mask_rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("need a matrix with at least two rows")
    centered = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    ok = norms > 1e-12 * max(1.0, float(np.abs(X).max()))
    C = np.full((X.shape[0], X.shape[0]), np.nan)
    Z = centered[ok] / norms[ok, None]
    C[np.ix_(ok, ok)] = np.clip(Z @ Z.T, -1.0, 1.0)
    idx = np.flatnonzero(ok)
    if len(idx) < 2:
        mean = float("nan")
    else:
        sub = C[np.ix_(idx, idx)]
        mean = float(sub[np.triu_indices(len(idx), 1)].mean())
    return Consistency(mean, C, X, int((~ok).sum()))


def loss_regression(baseline_ce, pruned_ce) -> tuple[float, float, float]:
    """Ordinary least squares of pruned-network loss on baseline loss: (slope, intercept, R^2)."""
    x = np.asarray(baseline_ce, dtype=np.float64).reshape(-1)
    y = np.asarray(pruned_ce, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size < 2:
        raise ContractError("need two equal-length loss vectors with at least two entries")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx <= 1e-300 or np.ptp(x) == 0:
        raise RegressionUndefined("baseline losses have zero variance")
    dy = y - y.mean()
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    syy = float(dy @ dy)
    resid = y - (slope * x + intercept)
    r2 = 1.0 if syy == 0 else 1.0 - float(resid @ resid) / syy
    return slope, intercept, r2


# artifact writers -------------------------------------------------------------


def write_histograms_csv(path, iterations, hist: np.ndarray) -> None:
    edges = np.linspace(0.0, 1.0, hist.shape[1] + 1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration"] + [f"{a:.2f}-{b:.2f}" for a, b in zip(edges[:-1], edges[1:])])
        for it, row in zip(iterations, hist):
            w.writerow([int(it)] + [int(v) for v in row])


def write_matrix_csv(path, M: np.ndarray, header=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if header is not None:
            w.writerow(header)
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def _savefig(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_histograms(path, iterations, hist: np.ndarray, max_panels: int = 4) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pick = np.unique(np.linspace(0, len(hist) - 1, min(max_panels, len(hist))).round().astype(int))
    fig, axes = plt.subplots(1, len(pick), figsize=(3.2 * len(pick), 2.6), squeeze=False)
    centers = (np.arange(hist.shape[1]) + 0.5) / hist.shape[1]
    for ax, i in zip(axes[0], pick):
        ax.bar(centers, hist[i], width=1.0 / hist.shape[1], edgecolor="k")
        ax.set_title(f"iteration {int(iterations[i])}")
        ax.set_xlim(0, 1)
        ax.set_xlabel("mask value")
    axes[0][0].set_ylabel("filters")
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def plot_heatmap(path, rows: np.ndarray, max_rows=100, max_cols=200) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    R = rows[:max_rows, :max_cols]
    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(R, aspect="auto", vmin=0, vmax=1, cmap="viridis", interpolation="nearest")
    ax.set_xlabel("filter")
    ax.set_ylabel("batch")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def plot_regression(path, x, y, slope, intercept) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x, y, s=3, alpha=0.4)
    xs = np.linspace(float(np.min(x)), float(np.max(x)), 2)
    ax.plot(xs, slope * xs + intercept, color="red")
    ax.set_xlabel("baseline CE loss")
    ax.set_ylabel("pruned CE loss")
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)
