"""Prune-training objective and the momentum-SGD contract.

total = mse + lambda1*|W_p|^2 + lambda2*|W_m|^2 + lambda3*sum(m) + lambda4*(1 - var(m))

The balance factor between the L1 and variance terms of the polarization
regularizer is ``lambda4 / lambda3``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, TrainingFault


@dataclass
class PruningConfig:
    lambda1: float = 5e-4
    lambda2: float = 5e-4
    lambda3: float = 1e-3
    lambda4: float = 5.0
    threshold: float = 0.5
    epochs: int = 10
    lr: float = 0.01
    lr_step: int = 5
    lr_gamma: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.lambda3 > 0:
            raise ContractError("lambda3 must be positive")
        if not self.lambda4 >= 0:
            raise ContractError("lambda4 must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")

    @property
    def balance(self) -> float:
        """Weight of the variance term relative to the L1 term."""
        return self.lambda4 / self.lambda3


@dataclass
class LossBreakdown:
    mse: torch.Tensor
    wp_decay: torch.Tensor
    wm_decay: torch.Tensor
    l1_mask: torch.Tensor
    variance_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).detach().item() for f in fields(self)}


def mse_loss(baseline_logits: torch.Tensor, pruned_logits: torch.Tensor) -> torch.Tensor:
    if baseline_logits.shape != pruned_logits.shape:
        raise ContractError(
            f"shape mismatch: {tuple(baseline_logits.shape)} vs {tuple(pruned_logits.shape)}"
        )
    return F.mse_loss(pruned_logits, baseline_logits)


def polarization_regularizer(mask) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(sum(m), 1 - var(m))`` with the population variance over all entries."""
    m = torch.as_tensor(mask)
    if not m.is_floating_point():
        m = m.to(torch.float64)
    m = m.reshape(-1)
    if m.numel() == 0:
        raise ContractError("mask is empty")
    l1 = m.sum()
    var = ((m - m.mean()) ** 2).mean()
    return l1, 1.0 - var


def squared_norm(params) -> torch.Tensor:
    params = list(params)
    if not params:
        return torch.zeros(())
    return sum((p**2).sum() for p in params)


def total_loss(baseline_logits, pruned_logits, mask, wp, wm, config: PruningConfig) -> LossBreakdown:
    mse = mse_loss(baseline_logits, pruned_logits)
    wp_decay = squared_norm(wp)
    wm_decay = squared_norm(wm)
    l1, var_term = polarization_regularizer(mask)
    total = (
        mse
        + config.lambda1 * wp_decay
        + config.lambda2 * wm_decay
        + config.lambda3 * l1
        + config.lambda4 * var_term
    )
    return LossBreakdown(mse, wp_decay, wm_decay, l1, var_term, total)


@dataclass
class StepSchedule:
    """Learning rate multiplied by ``gamma`` every ``step`` epochs."""

    base_lr: float
    step: int
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if self.step <= 0:
            return self.base_lr
        return self.base_lr * self.gamma ** (epoch // self.step)


def make_optimizer(param_groups, lr: float, momentum: float = 0.9) -> torch.optim.SGD:
    """Plain momentum SGD; weight decay lives in the loss."""
    return torch.optim.SGD(param_groups, lr=lr, momentum=momentum, weight_decay=0.0)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float, iteration: int | None = None) -> None:
    """Check gradients are finite, set the scheduled learning rate and step.

    Raises :class:`TrainingFault` naming the iteration on NaN/inf gradients.
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingFault("non-finite gradient", iteration=iteration)
        group["lr"] = lr
    optimizer.step()


class TrainingLog:
    """CSV of per-iteration loss rows."""

    COLUMNS = ("iteration", "epoch", "mse", "l1", "variance_term", "total", "lr")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def append(self, iteration, epoch, breakdown: LossBreakdown, lr) -> None:
        b = breakdown.as_floats()
        row = [iteration, epoch, b["mse"], b["l1_mask"], b["variance_term"], b["total"], lr]
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([repr(v) if isinstance(v, float) else v for v in row])


def check_finite(breakdown: LossBreakdown, iteration: int, mask=None) -> None:
    if math.isfinite(breakdown.total.detach().item()):
        return
    diag = {}
    if mask is not None:
        m = mask.detach().double().cpu().numpy()
        counts, _ = np.histogram(m[np.isfinite(m)], bins=10, range=(0.0, 1.0))
        diag["mask_histogram"] = counts.tolist()
        diag["mask_nonfinite"] = int((~np.isfinite(m)).sum())
    diag.update(breakdown.as_floats())
    raise TrainingFault("non-finite loss", iteration=iteration, diagnostics=diag)
