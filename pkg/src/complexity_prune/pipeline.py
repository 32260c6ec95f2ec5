"""Training stages: baseline, prune-training, fine-tuning, plus checkpoints."""

from __future__ import annotations

import copy
import csv
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, iterate_batches, num_batches
from .errors import ContractError, TrainingFault
from .masks import MaskNetwork, MaskSnapshotLog, batch_mask
from .models import PrunableNet, build_model
from .objective import (
    LossBreakdown,
    PruningConfig,
    StepSchedule,
    TrainingLog,
    check_finite,
    make_optimizer,
    optimizer_step,
    total_loss,
)
from .prune import average_masks

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "complexity_prune/checkpoint"
CHECKPOINT_VERSION = 1


def seed_everything(seed: int, threads: int | None = 1) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if threads is not None:
        torch.set_num_threads(threads)


@torch.no_grad()
def predict(model, x, batch_size=512, mask=None) -> torch.Tensor:
    was = model.training
    model.eval()
    out = torch.cat([model(x[i : i + batch_size], mask=mask) for i in range(0, len(x), batch_size)])
    model.train(was)
    return out


def accuracy(model, x, y, batch_size=512, mask=None) -> float:
    return (predict(model, x, batch_size, mask).argmax(1) == y).float().mean().item()


def per_sample_ce(model, x, y, batch_size=512, mask=None) -> np.ndarray:
    logits = predict(model, x, batch_size, mask)
    return F.cross_entropy(logits, y, reduction="none").numpy()


# checkpoints ---------------------------------------------------------------


def save_checkpoint(path, stage: str, model: PrunableNet | None = None, **payload) -> None:
    """Versioned ``torch.save`` container; see README for the key layout."""
    ckpt = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "stage": stage}
    if model is not None:
        ckpt["model_config"] = model.config()
        ckpt["model_state"] = model.state_dict()
    ckpt.update(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a checkpoint written by this package")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> PrunableNet:
    model = build_model(ckpt["model_config"])
    model.load_state_dict(ckpt["model_state"])
    return model


# classification training (baseline and fine-tune) -------------------------


@dataclass
class ClassifierSchedule:
    epochs: int
    lr: float
    lr_step: int
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-4
    batch_size: int = 128


def train_classifier(model, data: ImageDataset, sched: ClassifierSchedule, seed=0, log_path=None):
    """Cross-entropy SGD on the training split; returns per-epoch history rows."""
    opt = torch.optim.SGD(model.parameters(), lr=sched.lr, momentum=sched.momentum,
                          weight_decay=sched.weight_decay)
    lr_at = StepSchedule(sched.lr, sched.lr_step, sched.lr_gamma).lr_at
    history = []
    it = 0
    for epoch in range(sched.epochs):
        model.train()
        lr = lr_at(epoch)
        total, count = 0.0, 0
        for xb, yb in iterate_batches(data.x_train, data.y_train, sched.batch_size, seed, epoch):
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingFault("non-finite classification loss", iteration=it)
            opt.zero_grad()
            loss.backward()
            optimizer_step(opt, lr, it)
            total += loss.item() * len(yb)
            count += len(yb)
            it += 1
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count,
               "test_acc": accuracy(model, data.x_test, data.y_test)}
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f test acc %.4f", epoch, lr, row["train_loss"], row["test_acc"])
    model.eval()
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "lr", "train_loss", "test_acc"])
            w.writeheader()
            w.writerows(history)
    return history


def train_baseline(model, data: ImageDataset, sched: ClassifierSchedule, seed=0, log_path=None):
    """Train ``model`` in place from scratch; returns ``(model, test_accuracy)``."""
    seed_everything(seed)
    train_classifier(model, data, sched, seed, log_path)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, accuracy(model, data.x_test, data.y_test)


def finetune(model, data: ImageDataset, sched: ClassifierSchedule, seed=0, log_path=None):
    """Fine-tune a surgically pruned model; returns ``(model, acc_before, acc_after)``."""
    acc_before = accuracy(model, data.x_test, data.y_test)
    if sched.epochs == 0:
        return model, acc_before, acc_before
    seed_everything(seed + 2)
    for p in model.parameters():
        p.requires_grad_(True)
    train_classifier(model, data, sched, seed + 2, log_path)
    return model, acc_before, accuracy(model, data.x_test, data.y_test)


# prune-training --------------------------------------------------------------


@dataclass
class TrainingState:
    stage: str = "prune"
    epoch: int = 0
    batch_index: int = 0
    iteration: int = 0
    seed: int = 0
    checkpoint_paths: list[str] = field(default_factory=list)


class PruneTrainer:
    """Joint optimization of the pruned network and the mask network.

    Per batch: frozen-baseline logits -> per-sample masks -> sample weights
    -> batch mask -> masked forward of the pruned network -> total loss.
    The pruned network trains in train mode: batch-norm uses batch
    statistics and keeps updating its running averages, which the
    post-surgery model then inherits.
    """

    def __init__(
        self,
        baseline: PrunableNet,
        config: PruningConfig,
        weighting: str = "complexity",
        snapshot_every: int = 50,
        masknet: MaskNetwork | None = None,
        pruned: PrunableNet | None = None,
        log_dir=None,
    ):
        if weighting not in ("complexity", "uniform"):
            raise ContractError(f"unknown weighting {weighting!r}")
        self.baseline = baseline.eval()
        for p in self.baseline.parameters():
            p.requires_grad_(False)
        self.config = config
        self.weighting = weighting
        self.snapshot_every = snapshot_every
        torch.manual_seed(config.seed + 1)
        self.pruned = pruned if pruned is not None else copy.deepcopy(baseline)
        for p in self.pruned.parameters():
            p.requires_grad_(True)
        self.pruned.train()
        self.masknet = masknet if masknet is not None else MaskNetwork(baseline.num_classes, baseline.n_filters)
        self.optimizer = make_optimizer(
            [{"params": list(self.pruned.parameters())}, {"params": list(self.masknet.parameters())}],
            lr=config.lr, momentum=config.momentum,
        )
        self.schedule = StepSchedule(config.lr, config.lr_step, config.lr_gamma)
        self.state = TrainingState(seed=config.seed)
        self.snapshots: list[tuple[int, np.ndarray]] = []
        self.history: list[dict] = []
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self._loss_log = self._snap_log = None
        if self.log_dir is not None:
            self._loss_log = TrainingLog(self.log_dir / "prune_log.csv")
            self._snap_log = MaskSnapshotLog(self.log_dir / "mask_snapshots.csv", baseline.n_filters)

    def loss(self, xb, yb) -> tuple[LossBreakdown, torch.Tensor]:
        with torch.no_grad():
            target = self.baseline(xb)
        m = batch_mask(self.masknet, target, yb, self.weighting)
        out = self.pruned(xb, mask=m)
        b = total_loss(target, out, m, self.pruned.parameters(), self.masknet.parameters(), self.config)
        return b, m

    def step(self, xb, yb) -> LossBreakdown:
        st = self.state
        b, m = self.loss(xb, yb)
        check_finite(b, st.iteration, m)
        lr = self.schedule.lr_at(st.epoch)
        self.optimizer.zero_grad()
        b.total.backward()
        optimizer_step(self.optimizer, lr, st.iteration)
        row = {"iteration": st.iteration, "epoch": st.epoch, "lr": lr, **b.as_floats()}
        self.history.append(row)
        if self._loss_log is not None:
            self._loss_log.append(st.iteration, st.epoch, b, lr)
        if st.iteration % self.snapshot_every == 0:
            snap = m.detach().double().numpy().copy()
            self.snapshots.append((st.iteration, snap))
            if self._snap_log is not None:
                self._snap_log.append(st.iteration, snap)
        st.iteration += 1
        st.batch_index += 1
        return b

    def run(self, data: ImageDataset, max_iterations: int | None = None) -> list[dict]:
        """Train until ``config.epochs`` are done (or ``max_iterations`` more steps)."""
        cfg, st = self.config, self.state
        done = 0
        nb = num_batches(len(data.y_train), cfg.batch_size)
        while st.epoch < cfg.epochs:
            for xb, yb in iterate_batches(data.x_train, data.y_train, cfg.batch_size,
                                          cfg.seed, st.epoch, start=st.batch_index):
                self.step(xb, yb)
                done += 1
                if max_iterations is not None and done >= max_iterations:
                    if st.batch_index >= nb:
                        st.epoch, st.batch_index = st.epoch + 1, 0
                    return self.history
            st.epoch, st.batch_index = st.epoch + 1, 0
            if self.history:
                h = self.history[-1]
                log.info("prune epoch %d: mse %.4g var-term %.4f l1 %.2f", st.epoch - 1,
                         h["mse"], h["variance_term"], h["l1_mask"])
        return self.history

    @torch.no_grad()
    def batch_masks(self, data: ImageDataset, max_batches: int | None = None, seed: int | None = None):
        """Batch-level masks for batches of the training set (one row per batch)."""
        rows = []
        s = self.config.seed + 7 if seed is None else seed
        for i, (xb, yb) in enumerate(iterate_batches(data.x_train, data.y_train,
                                                     self.config.batch_size, s, 0)):
            if max_batches is not None and i >= max_batches:
                break
            rows.append(batch_mask(self.masknet, self.baseline(xb), yb, self.weighting).numpy())
        return np.stack(rows).astype(np.float64)

    def final_mask(self, data: ImageDataset, max_batches: int | None = None) -> np.ndarray:
        return average_masks(self.batch_masks(data, max_batches))

    # persistence -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "pruned_config": self.pruned.config(),
            "pruned_state": self.pruned.state_dict(),
            "masknet_config": self.masknet.config(),
            "masknet_state": self.masknet.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "training_state": asdict(self.state),
            "pruning_config": asdict(self.config),
            "weighting": self.weighting,
            "snapshot_every": self.snapshot_every,
            "snapshots": self.snapshots,
            "rng_state": torch.get_rng_state(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, "prune", **self.state_dict())
        self.state.checkpoint_paths.append(str(path))

    @classmethod
    def from_checkpoint(cls, path, baseline: PrunableNet, log_dir=None) -> "PruneTrainer":
        ckpt = load_checkpoint(path)
        if ckpt["stage"] != "prune":
            raise ContractError(f"{path} holds a {ckpt['stage']!r} checkpoint, expected 'prune'")
        pruned = build_model(ckpt["pruned_config"])
        pruned.load_state_dict(ckpt["pruned_state"])
        mcfg = ckpt["masknet_config"]
        masknet = MaskNetwork(mcfg["in_dim"], mcfg["n_filters"], mcfg["hidden"])
        masknet.load_state_dict(ckpt["masknet_state"])
        tr = cls(baseline, PruningConfig(**ckpt["pruning_config"]), ckpt["weighting"],
                 ckpt["snapshot_every"], masknet=masknet, pruned=pruned, log_dir=log_dir)
        tr.optimizer.load_state_dict(ckpt["optimizer_state"])
        tr.state = TrainingState(**ckpt["training_state"])
        tr.snapshots = list(ckpt["snapshots"])
        torch.set_rng_state(ckpt["rng_state"])
        return tr


def prune_train(baseline, data: ImageDataset, config: PruningConfig, weighting="complexity",
                snapshot_every=50, log_dir=None) -> PruneTrainer:
    """Run prune-training to completion; the trainer carries W_p, W_m and snapshots."""
    seed_everything(config.seed)
    trainer = PruneTrainer(baseline, config, weighting, snapshot_every, log_dir=log_dir)
    trainer.run(data)
    return trainer
