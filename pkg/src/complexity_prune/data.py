"""In-memory image datasets and deterministic batching.

``synthetic``  class prototypes (smooth random images) plus Gaussian noise.
``digits32``   scikit-learn's bundled 8x8 digits, upscaled and jittered onto a
               32x32 RGB canvas; ships with scikit-learn so it needs no network.
``mnist``, ``fashion_mnist``, ``cifar10``  torchvision downloads (md5-verified)
               into ``$COMPLEXITY_PRUNE_DATA`` (default ``~/.cache/complexity_prune``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, PruneError


class DatasetUnavailable(PruneError, OSError):
    pass


@dataclass
class ImageDataset:
    name: str
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    num_classes: int

    @property
    def in_channels(self) -> int:
        return self.x_train.shape[1]

    @property
    def input_size(self) -> int:
        return self.x_train.shape[-1]


def data_dir() -> Path:
    return Path(os.environ.get("COMPLEXITY_PRUNE_DATA", Path.home() / ".cache" / "complexity_prune"))


def _smooth_noise(rng, n, channels, size, cutoff=4):
    """Low-frequency random images: random coarse grid, bilinearly upsampled."""
    coarse = torch.from_numpy(rng.standard_normal((n, channels, cutoff, cutoff)).astype(np.float32))
    return F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)


def synthetic(
    n_train=2048,
    n_test=512,
    num_classes=10,
    channels=1,
    size=16,
    noise=1.0,
    class_probs=None,
    seed=0,
) -> ImageDataset:
    """Gaussian blobs rendered as images: ``x = prototype[y] + noise * eps``."""
    rng = np.random.default_rng(seed)
    protos = _smooth_noise(rng, num_classes, channels, size)
    protos = protos / protos.flatten(1).std(dim=1).view(-1, 1, 1, 1)
    p = None if class_probs is None else np.asarray(class_probs, dtype=np.float64) / np.sum(class_probs)

    def draw(n):
        y = torch.from_numpy(rng.choice(num_classes, size=n, p=p).astype(np.int64))
        eps = torch.from_numpy(rng.standard_normal((n, channels, size, size)).astype(np.float32))
        return protos[y] + noise * eps, y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return ImageDataset("synthetic", xtr, ytr, xte, yte, num_classes)


def digits32(n_train=10000, n_test=2000, seed=0, test_fraction=0.2) -> ImageDataset:
    """Jittered, tinted, noisy 32x32 renderings of the scikit-learn digits.

    Train and test renderings come from disjoint sets of source digits.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = torch.from_numpy(d.images.astype(np.float32) / 16.0).unsqueeze(1)
    labels = torch.from_numpy(d.target.astype(np.int64))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_te = int(round(test_fraction * len(labels)))
    te_src, tr_src = order[:n_te], order[n_te:]

    def render(src, n):
        pick = rng.choice(src, size=n)
        out = torch.empty(n, 3, 32, 32)
        scales = rng.integers(18, 27, size=n)
        for i, (k, s) in enumerate(zip(pick, scales)):
            g = F.interpolate(imgs[k : k + 1], size=(int(s), int(s)), mode="bilinear", align_corners=False)[0]
            canvas = torch.zeros(1, 32, 32)
            oy, ox = rng.integers(0, 32 - s + 1, size=2)
            canvas[:, oy : oy + s, ox : ox + s] = g
            fg = torch.from_numpy(rng.uniform(0.4, 1.0, size=(3, 1, 1)).astype(np.float32))
            bg = torch.from_numpy(rng.uniform(0.0, 0.4, size=(3, 1, 1)).astype(np.float32))
            out[i] = bg + (fg - bg) * canvas
        out += 0.15 * torch.from_numpy(rng.standard_normal(out.shape).astype(np.float32))
        return out, labels[pick]

    xtr, ytr = render(tr_src, n_train)
    xte, yte = render(te_src, n_test)
    mean = xtr.mean(dim=(0, 2, 3), keepdim=True)
    std = xtr.std(dim=(0, 2, 3), keepdim=True)
    return ImageDataset("digits32", (xtr - mean) / std, ytr, (xte - mean) / std, yte, 10)


_TV = {
    "mnist": ("MNIST", (0.1307,), (0.3081,)),
    "fashion_mnist": ("FashionMNIST", (0.2860,), (0.3530,)),
    "cifar10": ("CIFAR10", (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


def torchvision_dataset(name, download=True) -> ImageDataset:
    import torchvision

    cls_name, mean, std = _TV[name]
    cls = getattr(torchvision.datasets, cls_name)
    root = data_dir()
    try:
        tr = cls(root, train=True, download=download)
        te = cls(root, train=False, download=download)
    except Exception as exc:  # network errors, missing files, bad checksums
        raise DatasetUnavailable(f"{name} not available under {root}: {exc}") from exc

    def to_tensor(ds):
        x = torch.as_tensor(np.asarray(ds.data), dtype=torch.float32) / 255.0
        x = x.unsqueeze(1) if x.dim() == 3 else x.permute(0, 3, 1, 2)
        m = torch.tensor(mean).view(1, -1, 1, 1)
        s = torch.tensor(std).view(1, -1, 1, 1)
        return (x - m) / s, torch.as_tensor(np.asarray(ds.targets), dtype=torch.int64)

    xtr, ytr = to_tensor(tr)
    xte, yte = to_tensor(te)
    return ImageDataset(name, xtr, ytr, xte, yte, 10)


def load_dataset(name: str, subset: int | None = None, test_subset: int | None = None,
                 seed: int = 0, **kwargs) -> ImageDataset:
    if name == "synthetic":
        ds = synthetic(seed=seed, **kwargs)
    elif name == "digits32":
        ds = digits32(seed=seed, **kwargs)
    elif name in _TV:
        ds = torchvision_dataset(name, **kwargs)
    else:
        raise ContractError(f"unknown dataset {name!r}")
    g = torch.Generator().manual_seed(seed)
    if subset is not None and subset < len(ds.y_train):
        idx = torch.randperm(len(ds.y_train), generator=g)[:subset]
        ds.x_train, ds.y_train = ds.x_train[idx], ds.y_train[idx]
    if test_subset is not None and test_subset < len(ds.y_test):
        idx = torch.randperm(len(ds.y_test), generator=g)[:test_subset]
        ds.x_test, ds.y_test = ds.x_test[idx], ds.y_test[idx]
    return ds


def iterate_batches(x, y, batch_size, seed=0, epoch=0, shuffle=True, start=0):
    """Yield ``(xb, yb)``; the order depends only on ``(seed, epoch)``.

    ``start`` skips the first batches, which is how resumed runs pick up
    mid-epoch with an identical data order.
    """
    n = len(y)
    if shuffle:
        g = torch.Generator().manual_seed(int(seed) * 100003 + int(epoch))
        order = torch.randperm(n, generator=g)
    else:
        order = torch.arange(n)
    for b, i in enumerate(range(0, n, batch_size)):
        if b < start:
            continue
        idx = order[i : i + batch_size]
        yield x[idx], y[idx]


def num_batches(n, batch_size):
    return (n + batch_size - 1) // batch_size
