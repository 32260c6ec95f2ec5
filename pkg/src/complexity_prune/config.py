"""Run configuration: a flat YAML file plus ``key=value`` overrides.

Every key of :class:`RunConfig` may appear in the file; anything else is
rejected.  Overrides are parsed as YAML scalars, so ``lambda4=5`` is a number
and ``subset=null`` is ``None``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigParseError, ValidationError
from .objective import PruningConfig

STAGES = ("baseline", "prune", "surgery", "finetune", "analyze")
DATASETS = ("synthetic", "digits32", "mnist", "fashion_mnist", "cifar10")
MODELS = ("plain_cnn", "resnet")


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    dataset_options: dict = field(default_factory=dict)
    subset: int | None = None
    test_subset: int | None = None
    model: str = "plain_cnn"
    model_options: dict = field(default_factory=dict)
    run_dir: str | None = None
    stages: list = field(default_factory=lambda: list(STAGES))
    seed: int = 0

    lambda1: float = 5e-4
    lambda2: float = 5e-4
    lambda3: float = 1e-3
    lambda4: float = 20.0
    threshold: float = 0.5
    target_flops_reduction: float | None = None

    batch_size: int = 128
    momentum: float = 0.9
    lr_gamma: float = 0.1
    weight_decay: float = 4e-4
    baseline_epochs: int = 20
    baseline_lr: float = 0.1
    baseline_lr_step: int = 8
    prune_epochs: int = 10
    prune_lr: float = 0.01
    prune_lr_step: int = 5
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    finetune_lr_step: int = 8

    uniform_weights: bool = False
    no_regularizer: bool = False
    snapshot_every: int = 50
    mask_batches: int | None = None
    consistency_batches: int = 20

    def validate(self) -> "RunConfig":
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v < 0:
                raise ValidationError(name, f"must be a finite non-negative number, got {v!r}")
        if self.lambda3 == 0:
            raise ValidationError("lambda3", "must be strictly positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold", "must lie in (0, 1)")
        if self.target_flops_reduction is not None and not 0.0 < self.target_flops_reduction < 1.0:
            raise ValidationError("target_flops_reduction", "must lie in (0, 1)")
        if self.dataset not in DATASETS:
            raise ValidationError("dataset", f"unknown dataset {self.dataset!r}")
        if self.model not in MODELS:
            raise ValidationError("model", f"unknown model {self.model!r}")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValidationError("stages", f"unknown stages {bad}")
        for name in ("baseline_epochs", "prune_epochs", "finetune_epochs", "consistency_batches"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValidationError(name, "must be a non-negative integer")
        for name in ("batch_size", "snapshot_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(name, "must be a positive integer")
        for name in ("baseline_lr", "prune_lr", "finetune_lr", "momentum", "weight_decay", "lr_gamma"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ValidationError(name, "must be a finite non-negative number")
        for name in ("subset", "test_subset", "mask_batches"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ValidationError(name, "must be null or a positive integer")
        if not isinstance(self.dataset_options, dict) or not isinstance(self.model_options, dict):
            raise ValidationError("dataset_options", "options must be mappings")
        return self

    def pruning(self) -> PruningConfig:
        return PruningConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            lambda4=0.0 if self.no_regularizer else self.lambda4,
            threshold=self.threshold,
            epochs=self.prune_epochs,
            lr=self.prune_lr,
            lr_step=self.prune_lr_step,
            lr_gamma=self.lr_gamma,
            momentum=self.momentum,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    @property
    def weighting(self) -> str:
        return "uniform" if self.uniform_weights else "complexity"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())


_FIELDS = {f.name for f in fields(RunConfig)}
_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("float", "float | None")}


def _coerce(d: dict) -> dict:
    out = dict(d)
    for k, v in out.items():
        if k in _FLOAT_FIELDS and isinstance(v, int) and not isinstance(v, bool):
            out[k] = float(v)
    if isinstance(out.get("stages"), str):
        out["stages"] = [s.strip() for s in out["stages"].split(",") if s.strip()]
    return out


def _load_yaml(text: str, source: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigParseError(f"{source}: {exc}", line=None if mark is None else mark.line + 1) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigParseError(f"{source}: top level must be a mapping", line=1)
    return data


def parse_overrides(overrides) -> dict:
    if overrides is None:
        return {}
    if isinstance(overrides, dict):
        return dict(overrides)
    out = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigParseError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _load_yaml(f"v: {v}", f"override {k}")["v"] if v.strip() else None
    return out


def parse_and_validate(path=None, overrides=None) -> RunConfig:
    """Merge the YAML file at ``path`` with overrides (overrides win) and validate."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigParseError(f"config file {p} does not exist")
        data = _load_yaml(p.read_text(), str(p))
    data.update(parse_overrides(overrides))
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ValidationError(unknown[0], "unknown configuration key")
    try:
        cfg = RunConfig(**_coerce(data))
    except TypeError as exc:
        raise ValidationError("config", str(exc)) from exc
    return cfg.validate()
