"""Turn converged soft masks into a physically smaller network."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch import ArchitectureSpec, count_flops, flops_reduction
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class PruneDecision:
    final_mask: np.ndarray
    threshold: float
    keep: np.ndarray  # bool, one entry per filter
    per_layer_kept: dict[str, int]
    forced: list[str] = field(default_factory=list)

    @property
    def keep_set(self) -> list[int]:
        return np.flatnonzero(self.keep).tolist()

    @property
    def remove_set(self) -> list[int]:
        return np.flatnonzero(~self.keep).tolist()

    def binary_mask(self) -> np.ndarray:
        return self.keep.astype(np.float64)

    def to_dict(self, spec: ArchitectureSpec | None = None) -> dict:
        d = {
            "threshold": self.threshold,
            "n_filters": int(self.keep.size),
            "n_kept": int(self.keep.sum()),
            "keep_set": self.keep_set,
            "remove_set": self.remove_set,
            "per_layer_kept": self.per_layer_kept,
            "forced_layers": self.forced,
            "final_mask": [float(v) for v in self.final_mask],
        }
        if spec is not None:
            layers = {}
            for l in spec.prunable_layers():
                sl = self.keep[l.filter_start : l.filter_stop]
                layers[l.name] = {
                    "kept": (np.flatnonzero(sl) + l.filter_start).tolist(),
                    "removed": (np.flatnonzero(~sl) + l.filter_start).tolist(),
                }
            d["layers"] = layers
        return d

    def save(self, path, spec: ArchitectureSpec | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(spec), indent=2) + "\n")


def average_masks(snapshots) -> np.ndarray:
    """Entry-wise mean of a non-empty sequence of equal-length masks."""
    rows = [np.asarray(s.detach().cpu() if torch.is_tensor(s) else s, dtype=np.float64).reshape(-1)
            for s in snapshots]
    if not rows:
        raise ContractError("no mask snapshots to average")
    if len({r.shape[0] for r in rows}) != 1:
        raise ContractError("mask snapshots differ in length")
    return np.mean(np.stack(rows), axis=0)


def binarize(mask, threshold: float, spec: ArchitectureSpec) -> PruneDecision:
    """Keep filters with mask >= threshold, then enforce group and non-empty-layer rules.

    A channel group is kept when its mean mask reaches the threshold.  A layer
    left with no filters keeps its highest-mask filter (and that filter's group).
    """
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape[0] != spec.n_filters:
        raise ContractError(f"mask has length {m.shape[0]}, expected {spec.n_filters}")
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    keep = m >= threshold
    group_of = {}
    for gi, g in enumerate(spec.channel_groups):
        keep[g] = m[g].mean() >= threshold
        for k in g:
            group_of[k] = gi

    forced = []
    for l in spec.prunable_layers():
        sl = slice(l.filter_start, l.filter_stop)
        if l.out_channels and not keep[sl].any():
            best = l.filter_start + int(np.argmax(m[sl]))
            if best in group_of:
                keep[spec.channel_groups[group_of[best]]] = True
            else:
                keep[best] = True
            forced.append(l.name)
            log.warning("layer %s lost every filter at threshold %.3f; force-keeping filter %d",
                        l.name, threshold, best)

    per_layer = {l.name: int(keep[l.filter_start : l.filter_stop].sum()) for l in spec.prunable_layers()}
    return PruneDecision(m, float(threshold), keep, per_layer, forced)


def check_feasible(decision: PruneDecision, spec: ArchitectureSpec) -> None:
    keep = decision.keep
    if keep.shape[0] != spec.n_filters:
        raise ContractError("decision does not match the architecture")
    for g in spec.channel_groups:
        if keep[g].any() and not keep[g].all():
            raise ContractError(f"channel group {g[:3]}... is split by the decision")
    for l in spec.prunable_layers():
        if l.out_channels and not keep[l.filter_start : l.filter_stop].any():
            raise ContractError(f"layer {l.name} would lose every filter")


def decision_flops_reduction(decision: PruneDecision, spec: ArchitectureSpec) -> float:
    return flops_reduction(count_flops(spec), count_flops(spec, decision.binary_mask()))


def threshold_for_target(mask, spec: ArchitectureSpec, target_reduction: float) -> float:
    """Smallest mask value usable as threshold whose decision removes >= target FLOPs.

    Bisection over the sorted distinct mask values; FLOPs reduction grows with
    the threshold.  Returns the largest candidate if the target is unreachable.
    """
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    cands = np.unique(np.clip(m, 1e-9, 1 - 1e-9))
    base = count_flops(spec)

    def reduction(t):
        d = binarize(m, float(t), spec)
        return 1.0 - count_flops(spec, d.binary_mask()) / base

    lo, hi = 0, len(cands) - 1
    if reduction(cands[hi]) < target_reduction:
        log.warning("target FLOPs reduction %.3f unreachable; best is %.3f",
                    target_reduction, reduction(cands[hi]))
        return float(cands[hi])
    while lo < hi:
        mid = (lo + hi) // 2
        if reduction(cands[mid]) >= target_reduction:
            hi = mid
        else:
            lo = mid + 1
    return float(cands[lo])


def surgery(model, decision: PruneDecision):
    """Physically remove the filters the decision drops; returns a new model."""
    spec = model.arch_spec()
    check_feasible(decision, spec)
    new = model.surgery(decision.keep)
    new.train(model.training)
    return new
