"""Sweep the variance weight lambda4 on generated data and record how masks split.

    python3 scripts/polarization_sweep.py --lambda4 0 1 5 20 --out runs/sweep.csv
"""

import argparse
import csv
import time

import numpy as np
import torch

from complexity_prune.analysis import batch_consistency, polarization_fraction
from complexity_prune.arch import count_flops
from complexity_prune.data import load_dataset
from complexity_prune.models import PlainCNN
from complexity_prune.objective import PruningConfig
from complexity_prune.pipeline import ClassifierSchedule, train_baseline, prune_train
from complexity_prune.prune import binarize, decision_flops_reduction


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambda4", type=float, nargs="+", default=[0.0, 1.0, 5.0, 20.0])
    ap.add_argument("--lambda3", type=float, default=0.001)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--n-train", type=int, default=8192)
    ap.add_argument("--noise", type=float, default=6.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    data = load_dataset("synthetic", n_train=args.n_train, n_test=1024, noise=args.noise, seed=args.seed)
    torch.manual_seed(args.seed)
    model, acc = train_baseline(PlainCNN(1, 10, (16, 32, 32, 64), 16), data,
                                ClassifierSchedule(epochs=5, lr=0.1, lr_step=3, batch_size=64), seed=args.seed)
    print(f"baseline accuracy {acc:.4f}, {count_flops(model.arch_spec())} MACs")
    spec = model.arch_spec()
    rows = []
    for lam4 in args.lambda4:
        t = time.perf_counter()
        cfg = PruningConfig(lambda3=args.lambda3, lambda4=lam4, epochs=args.epochs, batch_size=64, seed=args.seed)
        tr = prune_train(model, data, cfg)
        masks = tr.batch_masks(data, max_batches=20)
        final = masks.mean(axis=0)
        row = {
            "lambda4": lam4,
            "outside_0.1_0.9": polarization_fraction(final),
            "below_0.5": float(np.mean(final < 0.5)),
            "consistency": batch_consistency(masks).mean_correlation,
            "flops_reduction_at_0.5": decision_flops_reduction(binarize(final, 0.5, spec), spec),
            "seconds": round(time.perf_counter() - t, 1),
        }
        rows.append(row)
        print(row)
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
