"""Desk-scale CNNs with per-filter soft masks and structural surgery.

Both networks take an optional ``mask`` in ``forward``.  The mask is a vector
of length ``n_filters`` (or a ``(batch, n_filters)`` matrix) and multiplies
each prunable filter's output map after its batch-norm and ReLU, i.e. right
before the map is consumed by the next layer.  Because the gate sits after
batch-norm, a zero mask entry yields an exactly-zero map, which is what makes
masked execution and surgery agree.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import ArchitectureSpec, LayerSpec, count_flops, count_params
from .errors import ContractError, InputError


def _conv_out(hw, stride):
    return ((hw[0] + stride - 1) // stride, (hw[1] + stride - 1) // stride)


class PrunableNet(nn.Module):
    """Shared plumbing: site bookkeeping, mask gating and config round-trip."""

    arch_name = ""

    def __init__(self):
        super().__init__()
        self._sites: dict[str, tuple[int, int]] = {}

    # ``_sites`` maps a prunable conv name to its [start, stop) filter slice.
    def _register_site(self, name, width):
        start = sum(b - a for a, b in self._sites.values())
        self._sites[name] = (start, start + width)

    @property
    def n_filters(self) -> int:
        return sum(b - a for a, b in self._sites.values())

    def _gate(self, h, mask, site):
        if mask is None or site not in self._sites:
            return h
        a, b = self._sites[site]
        m = mask[..., a:b]
        if m.dim() == 1:
            return h * m.view(1, -1, 1, 1)
        return h * m.view(m.shape[0], -1, 1, 1)

    def _check(self, x, mask):
        if x.dim() != 4 or x.shape[1] != self.in_channels or tuple(x.shape[-2:]) != tuple(self.input_hw):
            raise InputError(
                f"expected input of shape (B, {self.in_channels}, {self.input_hw[0]}, "
                f"{self.input_hw[1]}), got {tuple(x.shape)}"
            )
        if mask is not None:
            if mask.shape[-1] != self.n_filters or mask.dim() > 2:
                raise ContractError(
                    f"mask has shape {tuple(mask.shape)}, expected (..., {self.n_filters})"
                )
            if mask.dim() == 2 and mask.shape[0] != x.shape[0]:
                raise ContractError("per-sample mask rows must match the batch size")

    def arch_spec(self) -> ArchitectureSpec:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def flops(self) -> int:
        return count_flops(self.arch_spec())

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _slice_conv(src: nn.Conv2d, dst: nn.Conv2d, out_idx, in_idx):
    w = src.weight.detach()[out_idx][:, in_idx]
    dst.weight.data.copy_(w)


def _slice_bn(src: nn.BatchNorm2d, dst: nn.BatchNorm2d, idx):
    dst.weight.data.copy_(src.weight.detach()[idx])
    dst.bias.data.copy_(src.bias.detach()[idx])
    dst.running_mean.copy_(src.running_mean[idx])
    dst.running_var.copy_(src.running_var[idx])
    dst.num_batches_tracked.copy_(src.num_batches_tracked)


class PlainCNN(PrunableNet):
    """Stack of 3x3 conv-bn-relu blocks with 2x2 max-pooling after every second conv.

    Every conv is prunable.  The classifier flattens the last feature map.
    """

    arch_name = "plain_cnn"

    def __init__(self, in_channels=1, num_classes=10, widths=(16, 32, 32, 64), input_size=28):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        self.input_hw = (input_size, input_size) if np.isscalar(input_size) else tuple(input_size)
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        c = in_channels
        hw = self.input_hw
        for i, w in enumerate(self.widths):
            self.convs.append(nn.Conv2d(c, w, 3, padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(w))
            self._register_site(f"conv{i + 1}", w)
            if self._pool_after(i):
                hw = (hw[0] // 2, hw[1] // 2)
            c = w
        self.feat_hw = hw
        self.fc = nn.Linear(c * hw[0] * hw[1], num_classes)

    def _pool_after(self, i):
        return i % 2 == 1

    def forward(self, x, mask=None):
        self._check(x, mask)
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = F.relu(bn(conv(x)))
            x = self._gate(x, mask, f"conv{i + 1}")
            if self._pool_after(i):
                x = F.max_pool2d(x, 2)
        return self.fc(torch.flatten(x, 1))

    def config(self):
        return {
            "arch": self.arch_name,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "input_size": list(self.input_hw),
        }

    def arch_spec(self):
        layers = []
        prev = None
        c, hw = self.in_channels, self.input_hw
        for i, w in enumerate(self.widths):
            k = i + 1
            a, _ = self._sites[f"conv{k}"]
            layers.append(LayerSpec(f"conv{k}", "conv", [prev] if prev else [], c, w, 3, 1,
                                    hw, hw, prunable=True, filter_start=a))
            layers.append(LayerSpec(f"bn{k}", "bn", [f"conv{k}"], w, w, in_hw=hw, out_hw=hw))
            layers.append(LayerSpec(f"relu{k}", "act", [f"bn{k}"], w, w, in_hw=hw, out_hw=hw))
            prev = f"relu{k}"
            if self._pool_after(i):
                nhw = (hw[0] // 2, hw[1] // 2)
                layers.append(LayerSpec(f"pool{k}", "pool", [prev], w, w, 2, 2, hw, nhw))
                prev, hw = f"pool{k}", nhw
            c = w
        layers.append(LayerSpec("fc", "fc", [prev], c, self.num_classes, in_hw=hw, out_hw=(1, 1)))
        return ArchitectureSpec(self.in_channels, tuple(self.input_hw), self.num_classes, layers)

    def surgery(self, keep):
        keep = _as_keep(keep, self.n_filters)
        idx = {s: np.flatnonzero(keep[a:b]) for s, (a, b) in self._sites.items()}
        widths = [len(idx[f"conv{i + 1}"]) for i in range(len(self.widths))]
        new = PlainCNN(self.in_channels, self.num_classes, widths, self.input_hw)
        in_idx = np.arange(self.in_channels)
        for i in range(len(self.widths)):
            out_idx = idx[f"conv{i + 1}"]
            _slice_conv(self.convs[i], new.convs[i], out_idx, in_idx)
            _slice_bn(self.bns[i], new.bns[i], out_idx)
            in_idx = out_idx
        h, w = self.feat_hw
        fw = self.fc.weight.detach().view(self.num_classes, self.widths[-1], h, w)
        new.fc.weight.data.copy_(fw[:, in_idx].reshape(self.num_classes, -1))
        new.fc.bias.data.copy_(self.fc.bias.detach())
        return new


class BasicBlock(nn.Module):
    def __init__(self, in_planes, mid, planes, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, mid, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )


class ResNet(PrunableNet):
    """CIFAR-style ResNet: 3x3 stem, three stages of basic blocks, global pooling.

    By default only the first conv inside each block is prunable.  With
    ``prune_residual=True`` the stem, the second conv of every block and the
    projection shortcuts are prunable too; all filters writing into the same
    residual channel then form one channel group.
    """

    arch_name = "resnet"

    def __init__(
        self,
        in_channels=3,
        num_classes=10,
        stage_widths=(16, 32, 64),
        blocks_per_stage=1,
        mid_widths=None,
        prune_residual=False,
        input_size=32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.stage_widths = tuple(int(w) for w in stage_widths)
        self.blocks_per_stage = int(blocks_per_stage)
        self.prune_residual = bool(prune_residual)
        self.input_hw = (input_size, input_size) if np.isscalar(input_size) else tuple(input_size)
        n_blocks = len(self.stage_widths) * self.blocks_per_stage
        if mid_widths is None:
            mid_widths = [w for w in self.stage_widths for _ in range(self.blocks_per_stage)]
        self.mid_widths = tuple(int(w) for w in mid_widths)
        if len(self.mid_widths) != n_blocks:
            raise ContractError(f"need {n_blocks} mid widths, got {len(self.mid_widths)}")

        self.conv1 = nn.Conv2d(in_channels, self.stage_widths[0], 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(self.stage_widths[0])
        if self.prune_residual:
            self._register_site("stem", self.stage_widths[0])
        self.blocks = nn.ModuleList()
        c = self.stage_widths[0]
        for s, w in enumerate(self.stage_widths):
            for b in range(self.blocks_per_stage):
                stride = 2 if s > 0 and b == 0 else 1
                j = len(self.blocks)
                block = BasicBlock(c, self.mid_widths[j], w, stride)
                self.blocks.append(block)
                self._register_site(f"block{j}.conv1", self.mid_widths[j])
                if self.prune_residual:
                    self._register_site(f"block{j}.conv2", w)
                    if block.shortcut is not None:
                        self._register_site(f"block{j}.shortcut", w)
                c = w
        self.fc = nn.Linear(c, num_classes)

    def forward(self, x, mask=None):
        self._check(x, mask)
        x = self._gate(F.relu(self.bn1(self.conv1(x))), mask, "stem")
        for j, blk in enumerate(self.blocks):
            h = self._gate(F.relu(blk.bn1(blk.conv1(x))), mask, f"block{j}.conv1")
            h = self._gate(blk.bn2(blk.conv2(h)), mask, f"block{j}.conv2")
            sc = x if blk.shortcut is None else self._gate(blk.shortcut(x), mask, f"block{j}.shortcut")
            x = F.relu(h + sc)
        x = F.adaptive_avg_pool2d(x, 1)
        return self.fc(torch.flatten(x, 1))

    def config(self):
        return {
            "arch": self.arch_name,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stage_widths": list(self.stage_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "mid_widths": list(self.mid_widths),
            "prune_residual": self.prune_residual,
            "input_size": list(self.input_hw),
        }

    def _site_start(self, name):
        return self._sites[name][0] if name in self._sites else None

    def arch_spec(self):
        L = []

        def add(name, kind, inputs, cin, cout, k=1, stride=1, in_hw=(1, 1), out_hw=(1, 1)):
            start = self._site_start(name)
            L.append(LayerSpec(name, kind, inputs, cin, cout, k, stride, tuple(in_hw),
                               tuple(out_hw), prunable=start is not None, filter_start=start))

        hw = self.input_hw
        c0 = self.stage_widths[0]
        add("stem", "conv", [], self.in_channels, c0, 3, 1, hw, hw)
        add("stem.bn", "bn", ["stem"], c0, c0, in_hw=hw, out_hw=hw)
        add("stem.relu", "act", ["stem.bn"], c0, c0, in_hw=hw, out_hw=hw)
        prev, c = "stem.relu", c0
        for j, blk in enumerate(self.blocks):
            p = f"block{j}"
            stride = blk.conv1.stride[0]
            ohw = _conv_out(hw, stride)
            mid, w = blk.conv1.out_channels, blk.conv2.out_channels
            add(f"{p}.conv1", "conv", [prev], c, mid, 3, stride, hw, ohw)
            add(f"{p}.bn1", "bn", [f"{p}.conv1"], mid, mid, in_hw=ohw, out_hw=ohw)
            add(f"{p}.relu1", "act", [f"{p}.bn1"], mid, mid, in_hw=ohw, out_hw=ohw)
            add(f"{p}.conv2", "conv", [f"{p}.relu1"], mid, w, 3, 1, ohw, ohw)
            add(f"{p}.bn2", "bn", [f"{p}.conv2"], w, w, in_hw=ohw, out_hw=ohw)
            skip = prev
            if blk.shortcut is not None:
                add(f"{p}.shortcut", "conv", [prev], c, w, 1, stride, hw, ohw)
                add(f"{p}.shortcut.bn", "bn", [f"{p}.shortcut"], w, w, in_hw=ohw, out_hw=ohw)
                skip = f"{p}.shortcut.bn"
            add(f"{p}.add", "add", [f"{p}.bn2", skip], w, w, in_hw=ohw, out_hw=ohw)
            add(f"{p}.relu2", "act", [f"{p}.add"], w, w, in_hw=ohw, out_hw=ohw)
            prev, c, hw = f"{p}.relu2", w, ohw
        add("pool", "pool", [prev], c, c, hw[0], hw[0], hw, (1, 1))
        add("fc", "fc", ["pool"], c, self.num_classes)
        return ArchitectureSpec(self.in_channels, tuple(self.input_hw), self.num_classes, L,
                                self._channel_groups())

    def _stream_writers(self):
        """Sites writing into each residual stream (one stream per stage)."""
        streams = []
        j = 0
        for s in range(len(self.stage_widths)):
            writers = ["stem"] if s == 0 else []
            for b in range(self.blocks_per_stage):
                if self.blocks[j].shortcut is not None:
                    writers.append(f"block{j}.shortcut")
                writers.append(f"block{j}.conv2")
                j += 1
            streams.append(writers)
        return streams

    def _channel_groups(self):
        if not self.prune_residual:
            return []
        groups = []
        for writers in self._stream_writers():
            width = self._sites[writers[0]][1] - self._sites[writers[0]][0]
            for ch in range(width):
                groups.append([self._sites[w][0] + ch for w in writers])
        return groups

    def surgery(self, keep):
        keep = _as_keep(keep, self.n_filters)
        idx = {s: np.flatnonzero(keep[a:b]) for s, (a, b) in self._sites.items()}

        stream_idx = []
        for s, writers in enumerate(self._stream_writers()):
            if not self.prune_residual:
                stream_idx.append(np.arange(self.stage_widths[s]))
                continue
            first = idx[writers[0]]
            for w in writers[1:]:
                if not np.array_equal(idx[w], first):
                    raise ContractError(
                        f"residual stream {s}: {w} keeps different channels than {writers[0]}; "
                        "apply channel-group closure before surgery"
                    )
            stream_idx.append(first)

        new = ResNet(
            self.in_channels,
            self.num_classes,
            [len(i) for i in stream_idx],
            self.blocks_per_stage,
            [len(idx[f"block{j}.conv1"]) for j in range(len(self.blocks))],
            self.prune_residual,
            self.input_hw,
        )
        _slice_conv(self.conv1, new.conv1, stream_idx[0], np.arange(self.in_channels))
        _slice_bn(self.bn1, new.bn1, stream_idx[0])
        prev = stream_idx[0]
        for j, (ob, nb) in enumerate(zip(self.blocks, new.blocks)):
            cur = stream_idx[j // self.blocks_per_stage]
            mid = idx[f"block{j}.conv1"]
            _slice_conv(ob.conv1, nb.conv1, mid, prev)
            _slice_bn(ob.bn1, nb.bn1, mid)
            _slice_conv(ob.conv2, nb.conv2, cur, mid)
            _slice_bn(ob.bn2, nb.bn2, cur)
            if ob.shortcut is not None:
                if nb.shortcut is None:
                    raise ContractError(f"block{j}: projection shortcut vanished during surgery")
                _slice_conv(ob.shortcut[0], nb.shortcut[0], cur, prev)
                _slice_bn(ob.shortcut[1], nb.shortcut[1], cur)
            elif nb.shortcut is not None:
                raise ContractError(f"block{j}: identity shortcut cannot become a projection")
            prev = cur
        new.fc.weight.data.copy_(self.fc.weight.detach()[:, prev])
        new.fc.bias.data.copy_(self.fc.bias.detach())
        return new


def _as_keep(keep, n):
    keep = np.asarray(keep.detach().cpu() if torch.is_tensor(keep) else keep).astype(bool).reshape(-1)
    if keep.shape[0] != n:
        raise ContractError(f"keep vector has length {keep.shape[0]}, expected {n}")
    return keep


ARCHITECTURES = {"plain_cnn": PlainCNN, "resnet": ResNet}


def build_model(config: dict) -> PrunableNet:
    cfg = dict(config)
    arch = cfg.pop("arch")
    if arch not in ARCHITECTURES:
        raise ContractError(f"unknown architecture {arch!r}")
    return ARCHITECTURES[arch](**cfg)


def clone_model(model: PrunableNet) -> PrunableNet:
    return copy.deepcopy(model)


@torch.no_grad()
def forward_baseline(model: PrunableNet, batch: torch.Tensor) -> torch.Tensor:
    """Inference-mode logits (batch-norm uses running statistics)."""
    was_training = model.training
    model.eval()
    try:
        return model(batch)
    finally:
        model.train(was_training)


def forward_masked(model: PrunableNet, mask, batch: torch.Tensor) -> torch.Tensor:
    """Logits with every prunable filter scaled by its mask entry.

    Gradients flow to both the model and the mask.  The caller controls
    train/eval mode.
    """
    if not torch.is_tensor(mask):
        mask = torch.as_tensor(np.asarray(mask), dtype=batch.dtype)
    if mask.dim() != 1 or mask.shape[0] != model.n_filters:
        raise ContractError(f"mask has shape {tuple(mask.shape)}, expected ({model.n_filters},)")
    if torch.any(mask < 0) or torch.any(mask > 1):
        raise ContractError("mask entries must lie in [0, 1]")
    return model(batch, mask=mask)


def model_summary(model: PrunableNet) -> dict:
    spec = model.arch_spec()
    return {"flops": count_flops(spec), "params": count_params(spec), "n_filters": model.n_filters}
