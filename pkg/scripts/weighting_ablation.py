"""Complexity-weighted vs uniform-weighted masks from one shared baseline.

Runs the full pipeline twice through the CLI machinery and prints both reports.

    python3 scripts/weighting_ablation.py --config configs/digits32_resnet.yaml --out runs/ablation
"""

import argparse
import shutil
from pathlib import Path

from complexity_prune import cli
from complexity_prune.config import parse_and_validate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    out = Path(args.out)
    dirs = {"complexity": out / "complexity", "uniform": out / "uniform"}
    cfg = parse_and_validate(args.config, args.overrides)
    if not (dirs["complexity"] / "baseline.pt").exists():
        cli.run(["baseline"], cfg, dirs["complexity"])
    dirs["uniform"].mkdir(parents=True, exist_ok=True)
    shutil.copy(dirs["complexity"] / "baseline.pt", dirs["uniform"] / "baseline.pt")

    reports = {}
    for name, run_dir in dirs.items():
        arm = parse_and_validate(args.config, args.overrides + [f"uniform_weights={name == 'uniform'}"])
        reports[name] = cli.run(["prune", "surgery", "finetune", "analyze"], arm, run_dir)

    print(f"{'arm':12s} {'FLOPs red.':>10s} {'baseline':>9s} {'pruned':>8s} {'finetuned':>9s} {'acc drop':>9s}")
    for name, r in reports.items():
        print(f"{name:12s} {r.flops_reduction:10.4f} {r.baseline_acc:9.4f} {r.pruned_acc:8.4f} "
              f"{r.finetuned_acc:9.4f} {r.baseline_acc - r.finetuned_acc:9.4f}")


if __name__ == "__main__":
    main()
