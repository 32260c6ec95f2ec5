"""Per-sample soft masks, instance-complexity weights and their aggregation."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DegenerateBatchError, DegenerateBatchWarning

DEGENERATE_LOSS_SUM = 1e-12


class MaskNetwork(nn.Module):
    """Three fully-connected layers and a sigmoid, mapping baseline logits to ``n`` masks.

    Hidden width defaults to ``4 * in_dim``.  The last bias starts at
    ``init_bias`` so that initial masks sit near ``sigmoid(2) ~ 0.88``.
    """

    def __init__(self, in_dim: int, n_filters: int, hidden: int | None = None, init_bias: float = 2.0):
        super().__init__()
        hidden = hidden or 4 * in_dim
        self.in_dim = in_dim
        self.n_filters = n_filters
        self.hidden = hidden
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, n_filters)
        nn.init.constant_(self.fc3.bias, init_bias)

    def forward(self, logits):
        h = F.relu(self.fc1(logits))
        h = F.relu(self.fc2(h))
        return torch.sigmoid(self.fc3(h))

    def config(self):
        return {"in_dim": self.in_dim, "n_filters": self.n_filters, "hidden": self.hidden}


def sample_masks(masknet: MaskNetwork, baseline_logits: torch.Tensor) -> torch.Tensor:
    """One soft mask row per sample, each entry in (0, 1)."""
    if baseline_logits.dim() != 2 or baseline_logits.shape[1] != masknet.in_dim:
        raise ContractError(
            f"mask network expects (batch, {masknet.in_dim}) logits, got {tuple(baseline_logits.shape)}"
        )
    return masknet(baseline_logits)


def per_sample_ce(labels: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of each sample; ``labels`` may be class indices or one-hot rows."""
    if labels.dim() == 2:
        labels = labels.to(logits.dtype)
    return F.cross_entropy(logits, labels, reduction="none")


def weights_from_losses(losses, strict: bool = False) -> torch.Tensor:
    """Normalize non-negative losses to weights summing to one.

    Falls back to uniform weights (with a :class:`DegenerateBatchWarning`)
    when the losses sum to less than ``1e-12``; ``strict=True`` raises instead.
    """
    losses = torch.as_tensor(losses)
    if losses.dim() != 1 or losses.numel() == 0:
        raise ContractError("losses must be a non-empty vector")
    if torch.any(losses < 0):
        raise ContractError("losses must be non-negative")
    total = losses.sum()
    if total.item() < DEGENERATE_LOSS_SUM:
        if strict:
            raise DegenerateBatchError("all cross-entropy losses are ~0")
        warnings.warn("degenerate batch: all CE losses ~0, using uniform weights",
                      DegenerateBatchWarning, stacklevel=2)
        return uniform_weights(losses.numel(), dtype=losses.dtype)
    return losses / total


def complexity_weights(labels: torch.Tensor, baseline_logits: torch.Tensor, strict: bool = False) -> torch.Tensor:
    """Per-sample weights proportional to the baseline's cross-entropy loss.

    Computed without gradient: they depend only on the frozen baseline.
    """
    if baseline_logits.shape[0] == 0:
        raise ContractError("empty batch")
    with torch.no_grad():
        return weights_from_losses(per_sample_ce(labels, baseline_logits), strict=strict)


def uniform_weights(batch_size: int, dtype=torch.float32) -> torch.Tensor:
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    return torch.full((batch_size,), 1.0 / batch_size, dtype=dtype)


def aggregate_mask(per_sample_masks: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of mask rows: ``m = sum_i alpha_i * m_i``."""
    if per_sample_masks.dim() != 2:
        raise ContractError("per-sample masks must be a (batch, n) matrix")
    if weights.dim() != 1 or weights.shape[0] != per_sample_masks.shape[0]:
        raise ContractError(
            f"{per_sample_masks.shape[0]} mask rows but {tuple(weights.shape)} weights"
        )
    return weights.to(per_sample_masks.dtype) @ per_sample_masks


def batch_mask(masknet, baseline_logits, labels, weighting="complexity"):
    """Batch-level mask for one batch of baseline logits."""
    rows = sample_masks(masknet, baseline_logits)
    if weighting == "uniform":
        alpha = uniform_weights(rows.shape[0], dtype=rows.dtype)
    elif weighting == "complexity":
        alpha = complexity_weights(labels, baseline_logits)
    else:
        raise ContractError(f"unknown weighting {weighting!r}")
    return aggregate_mask(rows, alpha)


class MaskSnapshotLog:
    """Append-only CSV of mask snapshots: ``iteration, m0, m1, ..., m{n-1}``."""

    def __init__(self, path, n_filters: int):
        self.path = Path(path)
        self.n_filters = n_filters
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(["iteration"] + [f"m{k}" for k in range(n_filters)])

    def append(self, iteration: int, mask) -> None:
        m = np.asarray(mask.detach().cpu() if torch.is_tensor(mask) else mask, dtype=np.float64)
        if m.shape != (self.n_filters,):
            raise ContractError(f"snapshot has shape {m.shape}, expected ({self.n_filters},)")
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([int(iteration)] + [repr(float(v)) for v in m])

    @staticmethod
    def read(path) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(iterations, masks)`` with masks shaped ``(snapshots, n)``."""
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return data[:, 0].astype(np.int64), data[:, 1:]
