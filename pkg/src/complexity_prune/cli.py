"""Command-line entry point and stage orchestration over a run directory.

Run-directory layout::

    resolved_config.yaml   merged config actually used
    baseline.pt            baseline checkpoint (+ baseline_log.csv)
    prune.pt               prune-training state (+ prune_log.csv, mask_snapshots.csv)
    batch_masks.csv        per-batch masks after convergence
    decision.json          kept/removed filters per layer
    baseline_spec.json     architecture before surgery
    pruned_spec.json       architecture after surgery
    surgery.pt             compact model before fine-tuning
    finetuned.pt           compact model after fine-tuning (+ finetune_log.csv)
    report.json            PruneReport, plus histograms/consistency/regression CSVs and PNGs
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import analysis
from .arch import ArchitectureSpec, count_flops, count_params
from .config import STAGES, RunConfig, parse_and_validate
from .data import ImageDataset, load_dataset
from .errors import ConfigParseError, DependencyError, PruneError, TrainingFault, ValidationError
from .masks import MaskSnapshotLog
from .models import PlainCNN, ResNet
from .pipeline import (
    ClassifierSchedule,
    PruneTrainer,
    accuracy,
    finetune,
    load_checkpoint,
    model_from_checkpoint,
    per_sample_ce,
    save_checkpoint,
    seed_everything,
    train_baseline,
)
from .prune import average_masks, binarize, decision_flops_reduction, surgery, threshold_for_target

log = logging.getLogger("complexity_prune")

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_TRAINING = 0, 2, 3, 4

COMMANDS = {
    "train-baseline": ["baseline"],
    "prune": ["prune"],
    "surgery": ["surgery"],
    "finetune": ["finetune"],
    "analyze": ["analyze"],
    "report": [],
    "all": list(STAGES),
}


def default_run_dir(cfg: RunConfig) -> Path:
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"


def make_model(cfg: RunConfig, data: ImageDataset):
    opts = dict(cfg.model_options)
    if cfg.model == "plain_cnn":
        return PlainCNN(data.in_channels, data.num_classes, input_size=data.input_size, **opts)
    return ResNet(data.in_channels, data.num_classes, input_size=data.input_size, **opts)


def _dataset(cfg: RunConfig) -> ImageDataset:
    return load_dataset(cfg.dataset, cfg.subset, cfg.test_subset, cfg.seed, **cfg.dataset_options)


def _need(run_dir: Path, name: str) -> Path:
    p = run_dir / name
    if not p.exists():
        raise DependencyError(name, f"missing prerequisite artifact {p}; run the earlier stage first")
    return p


def _load_baseline(run_dir):
    ckpt = load_checkpoint(_need(run_dir, "baseline.pt"))
    model = model_from_checkpoint(ckpt).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, ckpt


def stage_baseline(cfg, run_dir, data):
    seed_everything(cfg.seed)
    model = make_model(cfg, data)
    sched = ClassifierSchedule(cfg.baseline_epochs, cfg.baseline_lr, cfg.baseline_lr_step,
                               cfg.lr_gamma, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    model, acc = train_baseline(model, data, sched, cfg.seed, run_dir / "baseline_log.csv")
    save_checkpoint(run_dir / "baseline.pt", "baseline", model, accuracy=acc)
    log.info("baseline accuracy %.4f", acc)


def stage_prune(cfg, run_dir, data):
    baseline, _ = _load_baseline(run_dir)
    for name in ("prune_log.csv", "mask_snapshots.csv"):
        (run_dir / name).unlink(missing_ok=True)
    seed_everything(cfg.seed)
    trainer = PruneTrainer(baseline, cfg.pruning(), cfg.weighting, cfg.snapshot_every, log_dir=run_dir)
    trainer.run(data)
    trainer.save(run_dir / "prune.pt")
    rows = trainer.batch_masks(data, cfg.mask_batches)
    analysis.write_matrix_csv(run_dir / "batch_masks.csv", rows,
                              header=[f"m{k}" for k in range(rows.shape[1])])


def _read_batch_masks(run_dir):
    return np.loadtxt(_need(run_dir, "batch_masks.csv"), delimiter=",", skiprows=1, ndmin=2)


def stage_surgery(cfg, run_dir, data):
    baseline, _ = _load_baseline(run_dir)
    ckpt = load_checkpoint(_need(run_dir, "prune.pt"))
    pruned = model_from_checkpoint({"model_config": ckpt["pruned_config"], "model_state": ckpt["pruned_state"]})
    spec = pruned.arch_spec()
    final = average_masks(_read_batch_masks(run_dir))
    threshold = cfg.threshold
    if cfg.target_flops_reduction is not None:
        threshold = threshold_for_target(final, spec, cfg.target_flops_reduction)
    decision = binarize(final, threshold, spec)
    compact = surgery(pruned, decision).eval()
    decision.save(run_dir / "decision.json", spec)
    spec.to_json(run_dir / "baseline_spec.json")
    compact.arch_spec().to_json(run_dir / "pruned_spec.json")
    acc = accuracy(compact, data.x_test, data.y_test)
    save_checkpoint(run_dir / "surgery.pt", "surgery", compact, accuracy=acc,
                    flops_reduction=decision_flops_reduction(decision, spec))
    log.info("surgery: kept %d/%d filters, FLOPs reduction %.4f, accuracy %.4f",
             int(decision.keep.sum()), decision.keep.size,
             decision_flops_reduction(decision, spec), acc)


def stage_finetune(cfg, run_dir, data):
    ckpt = load_checkpoint(_need(run_dir, "surgery.pt"))
    model = model_from_checkpoint(ckpt)
    sched = ClassifierSchedule(cfg.finetune_epochs, cfg.finetune_lr, cfg.finetune_lr_step,
                               cfg.lr_gamma, cfg.momentum, cfg.weight_decay, cfg.batch_size)
    model, before, after = finetune(model, data, sched, cfg.seed, run_dir / "finetune_log.csv")
    save_checkpoint(run_dir / "finetuned.pt", "finetune", model, accuracy=after, accuracy_before=before)
    log.info("fine-tune accuracy %.4f -> %.4f", before, after)


def stage_analyze(cfg, run_dir, data) -> analysis.PruneReport:
    baseline, bckpt = _load_baseline(run_dir)
    sckpt = load_checkpoint(_need(run_dir, "surgery.pt"))
    compact = model_from_checkpoint(sckpt).eval()
    fpath = run_dir / "finetuned.pt"
    fckpt = load_checkpoint(fpath) if fpath.exists() else None
    final_model = model_from_checkpoint(fckpt).eval() if fckpt else compact

    rows = _read_batch_masks(run_dir)
    final = average_masks(rows)
    cons = analysis.batch_consistency(rows[: max(2, cfg.consistency_batches)]) if len(rows) >= 2 else None

    iters, snaps = MaskSnapshotLog.read(_need(run_dir, "mask_snapshots.csv"))
    hist = analysis.polarization_histogram(snaps)
    analysis.write_histograms_csv(run_dir / "histograms.csv", iters, hist)
    analysis.plot_histograms(run_dir / "histograms.png", iters, hist)
    if cons is not None:
        analysis.write_matrix_csv(run_dir / "consistency_corr.csv", cons.correlation)
        analysis.plot_heatmap(run_dir / "consistency.png", cons.heatmap)

    b_ce = per_sample_ce(baseline, data.x_test, data.y_test)
    p_ce = per_sample_ce(final_model, data.x_test, data.y_test)
    slope, intercept, r2 = analysis.loss_regression(b_ce, p_ce)
    analysis.write_matrix_csv(run_dir / "loss_pairs.csv", np.stack([b_ce, p_ce], 1),
                              header=["baseline_ce", "pruned_ce"])
    analysis.plot_regression(run_dir / "loss_regression.png", b_ce, p_ce, slope, intercept)

    spec_before = baseline.arch_spec()
    spec_after = compact.arch_spec()
    fb, fa = count_flops(spec_before), count_flops(spec_after)
    report = analysis.PruneReport(
        flops_before=fb,
        flops_after=fa,
        flops_reduction=1.0 - fa / fb,
        params_before=count_params(spec_before),
        params_after=count_params(spec_after),
        baseline_acc=float(bckpt["accuracy"]),
        pruned_acc=float(sckpt["accuracy"]),
        finetuned_acc=float(fckpt["accuracy"]) if fckpt else float(sckpt["accuracy"]),
        mask_polarization_fraction=analysis.polarization_fraction(final),
        batch_consistency=float("nan") if cons is None else cons.mean_correlation,
        loss_regression={"slope": slope, "intercept": intercept, "r2": r2},
        extra={
            "weighting": cfg.weighting,
            "lambda4_effective": cfg.pruning().lambda4,
            "consistency_excluded_rows": 0 if cons is None else cons.excluded,
            "n_filters_before": spec_before.n_filters,
            "n_filters_after": spec_after.n_filters,
        },
    )
    report.to_json(run_dir / "report.json")
    return report


STAGE_FUNCS = {
    "baseline": stage_baseline,
    "prune": stage_prune,
    "surgery": stage_surgery,
    "finetune": stage_finetune,
    "analyze": stage_analyze,
}


def run(stages, cfg: RunConfig, run_dir=None) -> analysis.PruneReport | None:
    """Execute ``stages`` (in canonical order) against one run directory."""
    run_dir = Path(run_dir or cfg.run_dir or default_run_dir(cfg))
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.run_dir = str(run_dir)
    ordered = [s for s in STAGES if s in set(stages)]
    report = None
    try:
        with FileLock(str(run_dir / ".lock"), timeout=0):
            cfg.save(run_dir / "resolved_config.yaml")
            data = _dataset(cfg) if ordered else None
            for s in ordered:
                log.info("stage %s", s)
                out = STAGE_FUNCS[s](cfg, run_dir, data)
                if s == "analyze":
                    report = out
    except Timeout as exc:
        raise PruneError(f"{run_dir} is locked by another process") from exc
    if report is None and (run_dir / "report.json").exists():
        report = analysis.PruneReport.from_json(run_dir / "report.json")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="complexity-prune",
                                     description="instance-complexity-aware channel pruning")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--stages", metavar="LIST", help="comma-separated stages (for 'all')")
    common.add_argument("--run-dir", metavar="PATH")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.run_dir is not None:
        overrides.append(f"run_dir={args.run_dir}")
    if args.stages is not None:
        overrides.append(f"stages={args.stages}")
    try:
        cfg = parse_and_validate(args.config, overrides)
        if args.command == "report":
            if cfg.run_dir is None:
                raise ValidationError("run_dir", "report needs --run-dir")
            path = _need(Path(cfg.run_dir), "report.json")
            print(path.read_text(), end="")
            return EXIT_OK
        stages = cfg.stages if args.command == "all" else COMMANDS[args.command]
        report = run(stages, cfg)
        if report is not None:
            print(report.to_json())
        return EXIT_OK
    except (ValidationError, ConfigParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except PruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
