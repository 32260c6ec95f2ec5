"""Architecture descriptions and multiply-accumulate accounting.

An :class:`ArchitectureSpec` is a flat, topologically ordered list of layer
descriptors.  Every layer names the layers it reads from, so residual
additions are explicit.  Prunable conv layers own a contiguous slice of the
global filter index ``0..n-1``; a filter's mask entry gates that filter's
output feature map (after its batch-norm and activation).

FLOPs convention: multiply-accumulates of conv and fully-connected layers
only.  Batch-norm, activations, pooling and residual additions cost zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError

FLOPS_CONVENTION = (
    "multiply-accumulates of conv and fully-connected layers; "
    "batch-norm, activation, pooling and residual-add counted as zero"
)

LAYER_KINDS = ("conv", "bn", "act", "pool", "fc", "add")
SCHEMA_VERSION = 1


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str]
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    stride: int = 1
    in_hw: tuple[int, int] = (1, 1)
    out_hw: tuple[int, int] = (1, 1)
    prunable: bool = False
    filter_start: int | None = None

    @property
    def filter_stop(self) -> int | None:
        if self.filter_start is None:
            return None
        return self.filter_start + self.out_channels


@dataclass
class ArchitectureSpec:
    input_channels: int
    input_hw: tuple[int, int]
    num_classes: int
    layers: list[LayerSpec]
    channel_groups: list[list[int]] = field(default_factory=list)

    @property
    def n_filters(self) -> int:
        return sum(l.out_channels for l in self.layers if l.prunable)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def prunable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.prunable]

    def filter_layer_index(self) -> np.ndarray:
        """Position (among prunable layers) of the layer owning each filter."""
        owner = np.empty(self.n_filters, dtype=np.int64)
        for i, l in enumerate(self.prunable_layers()):
            owner[l.filter_start : l.filter_stop] = i
        return owner

    def validate(self) -> None:
        """Raise :class:`ContractError` if any structural invariant is broken."""
        seen: dict[str, LayerSpec] = {}
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise ContractError(f"{l.name}: unknown layer kind {l.kind!r}")
            if l.name in seen:
                raise ContractError(f"duplicate layer name {l.name!r}")
            if l.kind == "add" and len(l.inputs) < 2:
                raise ContractError(f"{l.name}: residual-add needs at least two inputs")
            if l.kind != "add" and len(l.inputs) > 1:
                raise ContractError(f"{l.name}: only residual-add may have several inputs")
            for src in l.inputs:
                if src not in seen:
                    raise ContractError(f"{l.name}: input {src!r} is not an earlier layer")
                p = seen[src]
                if p.out_channels != l.in_channels:
                    raise ContractError(
                        f"{l.name}: expects {l.in_channels} channels but {src} "
                        f"produces {p.out_channels}"
                    )
                if tuple(p.out_hw) != tuple(l.in_hw):
                    raise ContractError(f"{l.name}: spatial size mismatch with {src}")
            if not l.inputs:
                if l.in_channels != self.input_channels or tuple(l.in_hw) != tuple(self.input_hw):
                    raise ContractError(f"{l.name}: does not match the network input")
            if l.kind in ("bn", "act", "pool", "add") and l.in_channels != l.out_channels:
                raise ContractError(f"{l.name}: {l.kind} layers cannot change channel count")
            if l.prunable and l.kind != "conv":
                raise ContractError(f"{l.name}: only conv layers are prunable")
            seen[l.name] = l

        expected = 0
        for l in self.prunable_layers():
            if l.filter_start != expected:
                raise ContractError(
                    f"{l.name}: filter indices must be contiguous (expected start {expected})"
                )
            expected += l.out_channels
        if expected != self.n_filters:
            raise ContractError("filter index map does not cover n filters")

        in_group: set[int] = set()
        for g in self.channel_groups:
            for k in g:
                if not 0 <= k < self.n_filters:
                    raise ContractError(f"channel group index {k} out of range")
                if k in in_group:
                    raise ContractError(f"filter {k} belongs to more than one channel group")
                in_group.add(k)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ContractError(f"unsupported architecture schema version {version}")
        layers = []
        for ld in d.pop("layers"):
            ld = dict(ld)
            ld["in_hw"] = tuple(ld["in_hw"])
            ld["out_hw"] = tuple(ld["out_hw"])
            ld["inputs"] = list(ld["inputs"])
            layers.append(LayerSpec(**ld))
        d["input_hw"] = tuple(d["input_hw"])
        d["channel_groups"] = [list(g) for g in d.get("channel_groups", [])]
        return cls(layers=layers, **d)

    def to_json(self, path=None, indent=2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "ArchitectureSpec":
        p = Path(text_or_path) if not str(text_or_path).lstrip().startswith("{") else None
        text = p.read_text() if p is not None else text_or_path
        return cls.from_dict(json.loads(text))


def _check_binary_mask(spec: ArchitectureSpec, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape[0] != spec.n_filters:
        raise ContractError(f"mask has length {m.shape[0]}, expected {spec.n_filters}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContractError("FLOPs accounting needs a binarized mask (entries in {0, 1})")
    return m.astype(bool)


def _active_channels(spec: ArchitectureSpec, keep: np.ndarray | None) -> dict[str, np.ndarray]:
    """Boolean vector of non-zero output channels for every layer.

    A removed filter produces an all-zero map, which stays zero through
    batch-norm (applied before the gate), activations and pooling.  A residual
    add is zero in a channel only if every summand is.
    """
    active: dict[str, np.ndarray] = {}
    for l in spec.layers:
        if not l.inputs:
            src = np.ones(l.in_channels, dtype=bool)
        elif l.kind == "add":
            src = np.logical_or.reduce([active[i] for i in l.inputs])
        else:
            src = active[l.inputs[0]]
        if l.kind in ("conv", "fc"):
            if l.prunable and keep is not None:
                out = keep[l.filter_start : l.filter_stop].copy()
            else:
                out = np.ones(l.out_channels, dtype=bool)
        else:
            out = src
        active[l.name] = out
    return active


def _input_active(spec, active, l):
    if not l.inputs:
        return np.ones(l.in_channels, dtype=bool)
    return active[l.inputs[0]]


def count_flops(spec: ArchitectureSpec, mask=None, per_layer: bool = False):
    """Multiply-accumulate count of ``spec`` with the filters zeroed by ``mask`` removed.

    conv: active_in * k * k * active_out * out_h * out_w
    fc:   active_in_features * out_features
    """
    keep = _check_binary_mask(spec, mask)
    active = _active_channels(spec, keep)
    costs = {}
    for l in spec.layers:
        if l.kind == "conv":
            cin = int(_input_active(spec, active, l).sum())
            cout = int(active[l.name].sum())
            costs[l.name] = cin * l.kernel_size**2 * cout * l.out_hw[0] * l.out_hw[1]
        elif l.kind == "fc":
            cin = int(_input_active(spec, active, l).sum()) * l.in_hw[0] * l.in_hw[1]
            costs[l.name] = cin * l.out_channels
    total = sum(costs.values())
    return (total, costs) if per_layer else total


def count_params(spec: ArchitectureSpec, mask=None) -> int:
    """Trainable parameter count (conv weights without bias, bn affine pairs, fc weight+bias)."""
    keep = _check_binary_mask(spec, mask)
    active = _active_channels(spec, keep)
    total = 0
    for l in spec.layers:
        cin = int(_input_active(spec, active, l).sum())
        if l.kind == "conv":
            total += cin * l.kernel_size**2 * int(active[l.name].sum())
        elif l.kind == "bn":
            total += 2 * cin
        elif l.kind == "fc":
            total += cin * l.in_hw[0] * l.in_hw[1] * l.out_channels + l.out_channels
    return total


def flops_reduction(flops_before: int, flops_after: int) -> float:
    if flops_before <= 0:
        raise ContractError("baseline FLOPs must be positive")
    return 1.0 - flops_after / flops_before


def group_closure(spec: ArchitectureSpec, keep) -> np.ndarray:
    """Make every channel group all-kept or all-removed (kept iff any member kept)."""
    keep = np.asarray(keep, dtype=bool).copy()
    for g in spec.channel_groups:
        keep[g] = keep[g].any()
    return keep


def pruned_spec(spec: ArchitectureSpec, keep) -> ArchitectureSpec:
    """Spec of the network left after physically removing filters with ``keep == False``.

    Channel counts are propagated through the layer graph; residual-adds whose
    inputs disagree make the result fail :meth:`ArchitectureSpec.validate`.
    """
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.shape[0] != spec.n_filters:
        raise ContractError(f"keep vector has length {keep.shape[0]}, expected {spec.n_filters}")
    new_index = np.full(spec.n_filters, -1, dtype=np.int64)
    new_index[keep] = np.arange(int(keep.sum()))

    layers: list[LayerSpec] = []
    out_ch: dict[str, int] = {}
    next_start = 0
    for l in spec.layers:
        cin = out_ch[l.inputs[0]] if l.inputs else l.in_channels
        if l.kind in ("conv", "fc"):
            if l.prunable:
                cout = int(keep[l.filter_start : l.filter_stop].sum())
            else:
                cout = l.out_channels
        else:
            cout = cin
        nl = replace(l, in_channels=cin, out_channels=cout, inputs=list(l.inputs))
        if l.prunable:
            nl.filter_start = next_start
            next_start += cout
        out_ch[l.name] = cout
        layers.append(nl)

    groups = []
    for g in spec.channel_groups:
        kept = [int(new_index[k]) for k in g if keep[k]]
        if kept:
            groups.append(kept)
    return ArchitectureSpec(
        input_channels=spec.input_channels,
        input_hw=tuple(spec.input_hw),
        num_classes=spec.num_classes,
        layers=layers,
        channel_groups=groups,
    )
