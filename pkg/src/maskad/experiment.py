"""End-to-end orchestration: single runs, ablation sweeps, and reports.

A run directory contains: config.txt (resolved config), checkpoints/,
logs/, scores.txt, roc.txt, roc.png, summary.txt.  Interrupted runs resume
from the newest checkpoint when re-launched with the same directory.
"""

from __future__ import annotations

import base64
import dataclasses
import html
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import classifier as clf_mod
from . import config as config_mod
from . import metrics, plots
from .config import ConfigError, ExperimentConfig, diff_configs
from .data import LABEL_ABNORMAL, LabeledSlice, SliceManifest, load_split
from .mae import MaskedAutoencoder, build_mae, load_mae, train_mae
from .metrics import ROCResult, ScoredSample, ScoredSet, baseline_scores, roc_curve
from .seeding import derive_seed


class IncompleteRunError(RuntimeError):
    """A run directory is missing outputs a consumer needs."""


# swept axis -> config fields it may change
ABLATION_AXES = {
    "mask_ratio": ("mask_ratio",),
    "mae_epochs": ("mae_epochs",),
    "input_mode": ("input_mode",),
    "k_range": ("k_min", "k_max"),
    "per_pixel_beta": ("per_pixel_beta",),
    "loss_on_all_tokens": ("loss_on_all_tokens",),
    "anomaly_measure": ("anomaly_measure",),
}


@dataclass
class RunResult:
    out_dir: Path
    config: ExperimentConfig
    auroc: float
    scored: ScoredSet


@dataclass
class AblationResult:
    axis: str
    labels: list[str]
    aurocs: list[float]
    run_dirs: list[Path]
    table_path: Path
    plot_path: Path


def _latest_periodic(ckpt_dir: Path, prefix: str) -> Path | None:
    best: tuple[int, Path] | None = None
    for path in ckpt_dir.glob(f"{prefix}_*.npz"):
        m = re.fullmatch(rf"{prefix}_(\d+)\.npz", path.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), path)
    return best[1] if best else None


def _load_data(cfg: ExperimentConfig) -> tuple[SliceManifest, list[LabeledSlice], list[LabeledSlice]]:
    if not cfg.dataset_manifest:
        raise ConfigError("dataset_manifest is not set")
    manifest = SliceManifest.load(cfg.dataset_manifest)
    if (manifest.height, manifest.width) != cfg.image_size:
        raise ConfigError(
            f"manifest images are {manifest.height}x{manifest.width} but the "
            f"config expects {cfg.image_height}x{cfg.image_width}")
    return manifest, load_split(manifest, "train"), load_split(manifest, "test")


def mae_stage(cfg: ExperimentConfig, train_slices: Sequence[LabeledSlice],
              out_dir: Path) -> MaskedAutoencoder:
    """Train (or reload / resume) the masked autoencoder for this run."""
    ckpt_dir = out_dir / "checkpoints"
    final = ckpt_dir / "mae_final.npz"
    fresh = build_mae(
        cfg.image_size, cfg.patch_size, embed_dim=cfg.mae_embed_dim,
        depth=cfg.mae_depth, num_heads=cfg.mae_num_heads,
        decoder_embed_dim=cfg.mae_decoder_embed_dim,
        decoder_depth=cfg.mae_decoder_depth,
        decoder_num_heads=cfg.mae_decoder_num_heads, mlp_ratio=cfg.mlp_ratio,
        init_seed=derive_seed(cfg.seed, "mae-init"))
    resume_from: Path | None = None
    if final.is_file():
        model, meta, _ = load_mae(final)
        if model.arch != fresh.arch:
            raise ConfigError(
                f"{final} was trained with a different architecture; "
                "use a fresh output directory")
        if meta["epoch"] >= cfg.mae_epochs:
            return model
        resume_from = final
    else:
        resume_from = _latest_periodic(ckpt_dir, "mae")
    train_mae(fresh, train_slices, cfg, out_dir=out_dir, resume_from=resume_from)
    return fresh


def classifier_stage(cfg: ExperimentConfig, mae_model: MaskedAutoencoder | None,
                     train_slices: Sequence[LabeledSlice],
                     out_dir: Path) -> clf_mod.PatchClassifier:
    """Train (or reload / resume) the anomaly classifier for this run."""
    ckpt_dir = out_dir / "checkpoints"
    final = ckpt_dir / "classifier_final.npz"
    expected_mode = "raw_image" if cfg.no_mae else cfg.input_mode
    fresh = clf_mod.build_classifier(
        cfg.image_size, cfg.patch_size, embed_dim=cfg.clf_embed_dim,
        depth=cfg.clf_depth, num_heads=cfg.clf_num_heads,
        mlp_ratio=cfg.mlp_ratio, init_seed=derive_seed(cfg.seed, "clf-init"))
    resume_from: Path | None = None
    if final.is_file():
        model, meta, _ = clf_mod.load_classifier(final)
        if model.arch != fresh.arch:
            raise ConfigError(
                f"{final} was trained with a different architecture; "
                "use a fresh output directory")
        if model.input_mode != expected_mode:
            raise ConfigError(
                f"{final} was trained with input mode {model.input_mode!r}, "
                f"config expects {expected_mode!r}")
        if meta["epoch"] >= cfg.classifier_epochs:
            return model
        resume_from = final
    else:
        resume_from = _latest_periodic(ckpt_dir, "classifier")
    clf_mod.train_classifier(fresh, mae_model, train_slices, cfg,
                             out_dir=out_dir, resume_from=resume_from)
    return fresh


def score_split(cfg: ExperimentConfig, model: clf_mod.PatchClassifier,
                mae_model: MaskedAutoencoder | None,
                slices: Sequence[LabeledSlice]) -> ScoredSet:
    """Classifier anomaly probabilities for every slice, with seeded masks."""
    entries = []
    for i, s in enumerate(slices):
        value = clf_mod.score(model, mae_model, s.image,
                              num_passes=cfg.num_passes,
                              replace_visible=cfg.replace_visible,
                              mask_ratio=cfg.mask_ratio,
                              seed=derive_seed(cfg.seed, "score", i))
        entries.append(ScoredSample(s.sample_id, value, int(s.label == LABEL_ABNORMAL)))
    return ScoredSet(entries)


def _write_summary(path: Path, items: dict[str, Any]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


def _read_summary(path: Path) -> dict[str, str]:
    items = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            items[key] = value
    return items


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> RunResult:
    """Execute train -> score -> evaluate, writing all artifacts to out_dir."""
    t0 = time.perf_counter()
    cfg = config.resolve()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    manifest, train_slices, test_slices = _load_data(cfg)

    mae_model = None if cfg.no_mae else mae_stage(cfg, train_slices, out_dir)
    if cfg.anomaly_measure == "classifier":
        model = classifier_stage(cfg, mae_model, train_slices, out_dir)
        scored = score_split(cfg, model, mae_model, test_slices)
        classifier_epochs = model.trained_epochs
    else:
        scored = baseline_scores(mae_model, test_slices, cfg.anomaly_measure,
                                 num_passes=cfg.num_passes,
                                 replace_visible=cfg.replace_visible,
                                 mask_ratio=cfg.mask_ratio,
                                 seed=derive_seed(cfg.seed, "score"))
        classifier_epochs = 0

    scored.save(out_dir / "scores.txt")
    roc = roc_curve(scored)
    roc.save(out_dir / "roc.txt")
    plots.plot_roc(roc, out_dir / "roc.png", label=cfg.anomaly_measure)
    _write_summary(out_dir / "summary.txt", {
        "dataset": manifest.dataset,
        "n_train": len(train_slices),
        "n_test": len(test_slices),
        "anomaly_measure": cfg.anomaly_measure,
        "input_mode": ("raw_image" if cfg.no_mae else cfg.input_mode)
                      if cfg.anomaly_measure == "classifier" else "-",
        "mask_ratio": cfg.mask_ratio,
        "mae_epochs": 0 if cfg.no_mae else cfg.mae_epochs,
        "classifier_epochs": classifier_epochs,
        "seed": cfg.seed,
        "auroc": f"{roc.auroc:.10g}",
        "wall_time_s": f"{time.perf_counter() - t0:.1f}",
    })
    return RunResult(out_dir=out_dir, config=cfg, auroc=roc.auroc, scored=scored)


def _coerce_axis_value(cfg: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    derived = dataclasses.replace(cfg)
    if axis == "k_range":
        if isinstance(value, str):
            parts = re.split(r"[:,\-]", value.strip("() "))
            if len(parts) != 2:
                raise ValueError(f"k_range value must be 'k1:k2', got {value!r}")
            value = (int(parts[0]), int(parts[1]))
        k_min, k_max = value
        derived.k_min, derived.k_max = int(k_min), int(k_max)
        return derived
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if isinstance(value, str):
        value = config_mod._parse_value(axis, value, fields[axis].type)
    setattr(derived, axis, value)
    return derived


def _axis_label(axis: str, value: Any) -> str:
    if axis == "k_range" and not isinstance(value, str):
        value = f"{value[0]}-{value[1]}"
    if isinstance(value, bool):
        value = "true" if value else "false"
    return re.sub(r"[^A-Za-z0-9._\-]", "-", str(value))


def _run_point(config: ExperimentConfig, out_dir: Path) -> float:
    return run_experiment(config, out_dir).auroc


def run_ablation(base: ExperimentConfig, axis: str, values: Sequence[Any],
                 out_dir: str | Path, *, jobs: int = 1) -> AblationResult:
    """One full run per swept value, all other settings and seeds shared."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r} "
                         f"(expected one of {sorted(ABLATION_AXES)})")
    if not values:
        raise ValueError("ablation needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    labels, configs, run_dirs = [], [], []
    for value in values:
        derived = _coerce_axis_value(base, axis, value)
        changed = set(diff_configs(base, derived))
        if not changed <= set(ABLATION_AXES[axis]):
            raise ValueError(
                f"ablation point changed unexpected fields {sorted(changed)}")
        derived.resolve()  # fail fast on invalid points before any training
        label = _axis_label(axis, value)
        labels.append(label)
        configs.append(derived)
        run_dirs.append(out_dir / f"{axis}={label}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            aurocs = list(pool.map(_run_point, configs, run_dirs))
    else:
        aurocs = [_run_point(cfg, rd) for cfg, rd in zip(configs, run_dirs)]

    table_path = out_dir / "ablation_table.txt"
    lines = [f"{axis}\tauroc"]
    lines += [f"{label}\t{a:.10g}" for label, a in zip(labels, aurocs)]
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_path = plots.plot_ablation(axis, labels, aurocs, out_dir / "ablation_plot.png")
    return AblationResult(axis=axis, labels=labels, aurocs=aurocs,
                          run_dirs=run_dirs, table_path=table_path,
                          plot_path=plot_path)


def _img_tag(path: Path) -> str:
    data = base64.b64encode(path.read_bytes()).decode("ascii")
    return f'<img src="data:image/png;base64,{data}" style="max-width:480px">'


def _require(path: Path) -> Path:
    if not path.is_file():
        raise IncompleteRunError(f"missing {path}")
    return path


def emit_report(run_dirs: Sequence[str | Path], out_path: str | Path) -> Path:
    """Render completed run/ablation directories into one HTML document."""
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    sections: list[str] = []
    overview: list[tuple[str, str, str]] = []
    for raw in run_dirs:
        run = Path(raw)
        if (run / "summary.txt").is_file() or (run / "scores.txt").is_file():
            summary = _read_summary(_require(run / "summary.txt"))
            _require(run / "scores.txt")
            rows = "".join(f"<tr><th>{html.escape(k)}</th>"
                           f"<td>{html.escape(str(v))}</td></tr>"
                           for k, v in summary.items())
            img = _img_tag(run / "roc.png") if (run / "roc.png").is_file() else ""
            sections.append(f"<h2>Run: {html.escape(run.name)}</h2>"
                            f"<table>{rows}</table>{img}")
            overview.append((run.name, summary.get("anomaly_measure", "?"),
                             summary.get("auroc", "?")))
        elif (run / "ablation_table.txt").is_file():
            table = (run / "ablation_table.txt").read_text(encoding="utf-8")
            rows = "".join(
                "<tr>" + "".join(f"<td>{html.escape(c)}</td>"
                                 for c in line.split("\t")) + "</tr>"
                for line in table.splitlines() if line.strip())
            img = (_img_tag(run / "ablation_plot.png")
                   if (run / "ablation_plot.png").is_file() else "")
            sections.append(f"<h2>Ablation: {html.escape(run.name)}</h2>"
                            f"<table>{rows}</table>{img}")
        else:
            raise IncompleteRunError(
                f"{run} has neither summary.txt nor ablation_table.txt")

    head = "".join(f"<tr><td>{html.escape(n)}</td><td>{html.escape(m)}</td>"
                   f"<td>{html.escape(a)}</td></tr>" for n, m, a in overview)
    overview_html = (f"<h2>Overview</h2><table><tr><th>run</th><th>measure</th>"
                     f"<th>AUROC</th></tr>{head}</table>" if overview else "")
    doc = ("<!doctype html><html><head><meta charset='utf-8'>"
           "<title>Anomaly detection report</title><style>"
           "body{font-family:sans-serif;margin:2em}"
           "table{border-collapse:collapse;margin:0.6em 0}"
           "td,th{border:1px solid #999;padding:2px 8px;text-align:left}"
           "</style></head><body><h1>Anomaly detection report</h1>"
           f"{overview_html}{''.join(sections)}</body></html>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(doc, encoding="utf-8")
    return out_path
