"""Command-line interface.

Subcommands mirror the pipeline stages; chaining
train-mae -> train-classifier -> score -> evaluate on one output directory
produces the same artifacts as the programmatic orchestrator.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment, plots
from .classifier import load_classifier
from .config import ExperimentConfig
from .data import (SynthCounts, SynthSpec, build_splits,
                   generate_synth_dataset, load_split, read_scan_list)
from .mae import load_mae
from .metrics import ScoredSet, baseline_scores, roc_curve
from .seeding import derive_seed


def _add_config_args(parser: argparse.ArgumentParser, *, required: bool = True) -> None:
    parser.add_argument("--config", required=required,
                        help="experiment config file (key=value lines)")
    parser.add_argument("--out-dir", required=True, help="run output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.apply_overrides(args.overrides).resolve()


def _cmd_synth_data(args: argparse.Namespace) -> None:
    spec = SynthSpec(height=args.height, width=args.width)
    counts = SynthCounts(train=args.train, val_normal=args.val_normal,
                         val_abnormal=args.val_abnormal,
                         test_normal=args.test_normal,
                         test_abnormal=args.test_abnormal)
    manifest = generate_synth_dataset(args.out_dir, counts=counts, spec=spec,
                                      seed=args.seed)
    print(f"wrote {len(manifest.records)} slices; "
          f"manifest: {Path(args.out_dir) / 'manifest.txt'}")


def _cmd_build_splits(args: argparse.Namespace) -> None:
    scans = read_scan_list(args.scan_list)
    manifest = build_splits(scans, dataset=args.dataset, height=args.height,
                            width=args.width, test_frac=args.test_frac,
                            val_frac=args.val_frac, seed=args.seed)
    manifest.root = Path(args.scan_list).resolve().parent
    out = Path(args.out_dir) / "manifest.txt"
    manifest.save(out)
    counts = {s: sum(r.split == s for r in manifest.records)
              for s in ("train", "val", "test")}
    print(f"wrote {out} ({counts['train']} train / {counts['val']} val / "
          f"{counts['test']} test slices)")


def _cmd_train_mae(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    _, train_slices, _ = experiment._load_data(cfg)
    model = experiment.mae_stage(cfg, train_slices, out_dir)
    print(f"autoencoder trained for {model.trained_epochs} epochs; "
          f"checkpoint: {out_dir / 'checkpoints' / 'mae_final.npz'}")


def _cmd_train_classifier(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    _, train_slices, _ = experiment._load_data(cfg)
    if cfg.no_mae:
        mae_model = None
    else:
        mae_path = Path(args.mae) if args.mae else out_dir / "checkpoints" / "mae_final.npz"
        mae_model, _, _ = load_mae(mae_path)
    model = experiment.classifier_stage(cfg, mae_model, train_slices, out_dir)
    print(f"classifier trained for {model.trained_epochs} epochs "
          f"(input mode {model.input_mode}); "
          f"checkpoint: {out_dir / 'checkpoints' / 'classifier_final.npz'}")


def _cmd_score(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    manifest, _, _ = experiment._load_data(cfg)
    slices = load_split(manifest, args.split)
    if cfg.no_mae:
        mae_model = None
    else:
        mae_path = Path(args.mae) if args.mae else out_dir / "checkpoints" / "mae_final.npz"
        mae_model, _, _ = load_mae(mae_path)
    if cfg.anomaly_measure == "classifier":
        clf_path = (Path(args.classifier) if args.classifier
                    else out_dir / "checkpoints" / "classifier_final.npz")
        model, _, _ = load_classifier(clf_path)
        scored = experiment.score_split(cfg, model, mae_model, slices)
    else:
        scored = baseline_scores(mae_model, slices, cfg.anomaly_measure,
                                 num_passes=cfg.num_passes,
                                 replace_visible=cfg.replace_visible,
                                 mask_ratio=cfg.mask_ratio,
                                 seed=derive_seed(cfg.seed, "score"))
    out = out_dir / "scores.txt"
    scored.save(out)
    print(f"scored {len(scored.entries)} {args.split} slices -> {out}")


def _cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    scores_path = Path(args.scores) if args.scores else out_dir / "scores.txt"
    if not scores_path.is_file():
        raise experiment.IncompleteRunError(f"missing {scores_path} (run score first)")
    scored = ScoredSet.load(scores_path)
    roc = roc_curve(scored)
    roc.save(out_dir / "roc.txt")
    plots.plot_roc(roc, out_dir / "roc.png", label=cfg.anomaly_measure)
    labels = scored.labels
    experiment._write_summary(out_dir / "summary.txt", {
        "anomaly_measure": cfg.anomaly_measure,
        "input_mode": ("raw_image" if cfg.no_mae else cfg.input_mode)
                      if cfg.anomaly_measure == "classifier" else "-",
        "mask_ratio": cfg.mask_ratio,
        "seed": cfg.seed,
        "n_scored": len(labels),
        "n_normal": int((labels == 0).sum()),
        "n_abnormal": int((labels == 1).sum()),
        "auroc": f"{roc.auroc:.10g}",
    })
    print(f"AUROC {roc.auroc:.4f} over {len(labels)} slices; "
          f"summary: {out_dir / 'summary.txt'}")


def _cmd_ablate(args: argparse.Namespace) -> None:
    base = ExperimentConfig.load(args.config).apply_overrides(args.overrides)
    values = [v for v in args.values.split(",") if v.strip()]
    result = experiment.run_ablation(base, args.axis, values, args.out_dir,
                                     jobs=args.jobs)
    print(f"ablation over {result.axis}:")
    for label, auc in zip(result.labels, result.aurocs):
        print(f"  {label}\t{auc:.4f}")
    print(f"table: {result.table_path}\nplot: {result.plot_path}")


def _cmd_report(args: argparse.Namespace) -> None:
    out = experiment.emit_report(args.runs, Path(args.out_dir) / "report.html")
    print(f"report: {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskad",
        description="Masked-autoencoder anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic desk-scale dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--val-normal", type=int, default=16)
    p.add_argument("--val-abnormal", type=int, default=16)
    p.add_argument("--test-normal", type=int, default=32)
    p.add_argument("--test-abnormal", type=int, default=32)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("build-splits",
                       help="build a scan-grouped train/val/test manifest")
    p.add_argument("--scan-list", required=True,
                   help="tab-separated: scan_id, sample_id, image path, label")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--test-frac", type=float, default=0.4)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_build_splits)

    p = sub.add_parser("train-mae", help="train the masked autoencoder")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train_mae)

    p = sub.add_parser("train-classifier", help="train the anomaly classifier")
    _add_config_args(p)
    p.add_argument("--mae", help="autoencoder checkpoint "
                                 "(default: OUT_DIR/checkpoints/mae_final.npz)")
    p.set_defaults(func=_cmd_train_classifier)

    p = sub.add_parser("score", help="score a manifest split")
    _add_config_args(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mae", help="autoencoder checkpoint")
    p.add_argument("--classifier", help="classifier checkpoint")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="ROC / AUROC from a scores file")
    _add_config_args(p)
    p.add_argument("--scores", help="scores file (default: OUT_DIR/scores.txt)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one config axis, one run per value")
    _add_config_args(p)
    p.add_argument("--axis", required=True,
                   choices=sorted(experiment.ABLATION_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated values (k_range as k1:k2)")
    p.add_argument("--jobs", type=int, default=1,
                   help="run ablation points in parallel processes")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="render run directories into one HTML file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("runs", nargs="+", help="completed run/ablation directories")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # surface a clean one-line failure, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
