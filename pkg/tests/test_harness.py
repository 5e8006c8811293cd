"""Orchestration and CLI tests on a micro dataset (fast, full coverage of
the run-directory contract, resume, ablation, report, and exit codes).
"""

import numpy as np
import pytest

from maskad import cli
from maskad.config import ConfigError, ExperimentConfig
from maskad.data import SynthCounts, SynthSpec, generate_synth_dataset
from maskad.experiment import (IncompleteRunError, emit_report, run_ablation,
                               run_experiment)
from maskad.metrics import ScoredSet


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro_data")
    generate_synth_dataset(
        root,
        counts=SynthCounts(train=6, val_normal=2, val_abnormal=2,
                           test_normal=4, test_abnormal=4),
        spec=SynthSpec(height=32, width=32), seed=11)
    return root


def micro_config(dataset_root, **kw):
    base = dict(
        seed=3, dataset_manifest=str(dataset_root / "manifest.txt"),
        image_height=32, image_width=32, patch_size=8,
        mae_embed_dim=32, mae_depth=1, mae_num_heads=4,
        mae_decoder_embed_dim=16, mae_decoder_depth=1, mae_decoder_num_heads=4,
        mae_epochs=2, mae_batch_size=4,
        clf_embed_dim=32, clf_depth=1, clf_num_heads=4,
        classifier_epochs=2, classifier_batch_size=4,
        box_min=4, box_max=10, checkpoint_every=0,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestRunExperiment:

    def test_run_directory_contract(self, micro_dataset, tmp_path):
        res = run_experiment(micro_config(micro_dataset), tmp_path / "run")
        out = tmp_path / "run"
        for name in ("config.txt", "scores.txt", "roc.txt", "roc.png",
                     "summary.txt"):
            assert (out / name).is_file(), name
        assert (out / "checkpoints" / "mae_final.npz").is_file()
        assert (out / "checkpoints" / "classifier_final.npz").is_file()
        assert (out / "logs" / "mae_train.log").is_file()
        assert 0.0 <= res.auroc <= 1.0
        # persisted config is the resolved one and reproduces the run inputs
        saved = ExperimentConfig.load(out / "config.txt")
        assert saved == micro_config(micro_dataset).resolve()
        scored = ScoredSet.load(out / "scores.txt")
        assert len(scored.entries) == 8
        summary = (out / "summary.txt").read_text()
        assert f"auroc={res.auroc:.10g}" in summary

    def test_rerun_reuses_checkpoints_and_reproduces(self, micro_dataset, tmp_path):
        cfg = micro_config(micro_dataset)
        first = run_experiment(cfg, tmp_path / "run")
        mae_bytes = (tmp_path / "run" / "checkpoints" / "mae_final.npz").read_bytes()
        second = run_experiment(cfg, tmp_path / "run")
        assert second.auroc == first.auroc
        assert (tmp_path / "run" / "checkpoints" / "mae_final.npz").read_bytes() == mae_bytes

    def test_two_directories_identical_results(self, micro_dataset, tmp_path):
        cfg = micro_config(micro_dataset)
        a = run_experiment(cfg, tmp_path / "a")
        b = run_experiment(cfg, tmp_path / "b")
        assert a.auroc == b.auroc
        assert [e.score for e in a.scored.entries] == [e.score for e in b.scored.entries]

    def test_arch_change_on_existing_dir_rejected(self, micro_dataset, tmp_path):
        run_experiment(micro_config(micro_dataset), tmp_path / "run")
        bigger = micro_config(micro_dataset, mae_embed_dim=64)
        with pytest.raises(ConfigError, match="architecture"):
            run_experiment(bigger, tmp_path / "run")

    def test_baseline_measure_skips_classifier(self, micro_dataset, tmp_path):
        cfg = micro_config(micro_dataset, anomaly_measure="mse")
        run_experiment(cfg, tmp_path / "run")
        assert not (tmp_path / "run" / "checkpoints" / "classifier_final.npz").exists()
        assert (tmp_path / "run" / "summary.txt").read_text().count("anomaly_measure=mse")

    def test_no_mae_run(self, micro_dataset, tmp_path):
        cfg = micro_config(micro_dataset, no_mae=True)
        res = run_experiment(cfg, tmp_path / "run")
        assert not (tmp_path / "run" / "checkpoints" / "mae_final.npz").exists()
        assert "input_mode=raw_image" in (tmp_path / "run" / "summary.txt").read_text()
        assert 0.0 <= res.auroc <= 1.0

    def test_manifest_dims_mismatch_rejected(self, micro_dataset, tmp_path):
        cfg = micro_config(micro_dataset, image_height=64, image_width=64,
                           box_max=10)
        with pytest.raises(ConfigError, match="manifest"):
            run_experiment(cfg, tmp_path / "run")

    def test_missing_manifest_rejected(self, tmp_path):
        cfg = micro_config(tmp_path, dataset_manifest="")
        with pytest.raises(ConfigError):
            run_experiment(cfg, tmp_path / "run")


class TestAblation:

    def test_sweep_points_differ_only_on_axis(self, micro_dataset, tmp_path):
        base = micro_config(micro_dataset)
        res = run_ablation(base, "input_mode",
                           ["abs_diff", "squared_diff", "raw_recon"],
                           tmp_path / "abl")
        assert res.labels == ["abs_diff", "squared_diff", "raw_recon"]
        assert len(res.aurocs) == 3
        assert res.table_path.is_file() and res.plot_path.is_file()
        table = res.table_path.read_text().splitlines()
        assert table[0] == "input_mode\tauroc"
        assert len(table) == 4
        for label in res.labels:
            sub = ExperimentConfig.load(tmp_path / "abl" / f"input_mode={label}"
                                        / "config.txt")
            assert sub.input_mode == label
            # nothing but the swept axis differs from the base resolution
            diff = {k for k in vars(sub) if getattr(sub, k) != getattr(base.resolve(), k)}
            assert diff <= {"input_mode"}

    def test_k_range_sweep_parses_pairs(self, micro_dataset, tmp_path):
        base = micro_config(micro_dataset)
        res = run_ablation(base, "k_range", ["1:3", "2:4"], tmp_path / "abl")
        cfg = ExperimentConfig.load(tmp_path / "abl" / "k_range=1-3" / "config.txt")
        assert (cfg.k_min, cfg.k_max) == (1, 3)
        assert len(res.aurocs) == 2

    def test_mask_ratio_zero_point_runs_in_ae_mode(self, micro_dataset, tmp_path):
        base = micro_config(micro_dataset)
        run_ablation(base, "mask_ratio", ["0"], tmp_path / "abl")
        cfg = ExperimentConfig.load(tmp_path / "abl" / "mask_ratio=0" / "config.txt")
        assert cfg.ae_mode is True and cfg.num_passes == 1

    def test_unknown_axis_and_empty_values(self, micro_dataset, tmp_path):
        base = micro_config(micro_dataset)
        with pytest.raises(ValueError):
            run_ablation(base, "learning_rate", ["0.1"], tmp_path / "abl")
        with pytest.raises(ValueError):
            run_ablation(base, "mask_ratio", [], tmp_path / "abl")


class TestReport:

    def test_report_embeds_runs(self, micro_dataset, tmp_path):
        run_experiment(micro_config(micro_dataset), tmp_path / "run")
        out = emit_report([tmp_path / "run"], tmp_path / "report.html")
        text = out.read_text()
        assert "data:image/png;base64," in text
        assert "auroc" in text

    def test_incomplete_run_rejected(self, tmp_path):
        (tmp_path / "partial").mkdir()
        with pytest.raises(IncompleteRunError):
            emit_report([tmp_path / "partial"], tmp_path / "report.html")

    def test_missing_scores_rejected(self, micro_dataset, tmp_path):
        run_experiment(micro_config(micro_dataset), tmp_path / "run")
        (tmp_path / "run" / "scores.txt").unlink()
        with pytest.raises(IncompleteRunError):
            emit_report([tmp_path / "run"], tmp_path / "report.html")


class TestCLI:

    def test_synth_data_and_chained_stages(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert cli.main(["synth-data", "--out-dir", str(data), "--height", "32",
                         "--width", "32", "--train", "4", "--val-normal", "1",
                         "--val-abnormal", "1", "--test-normal", "2",
                         "--test-abnormal", "2"]) == 0
        cfgfile = tmp_path / "desk.cfg"
        micro_config(data).save(cfgfile)
        run = tmp_path / "run"
        common = ["--config", str(cfgfile), "--out-dir", str(run)]
        assert cli.main(["train-mae", *common]) == 0
        assert cli.main(["train-classifier", *common]) == 0
        assert cli.main(["score", *common]) == 0
        assert cli.main(["evaluate", *common]) == 0
        assert (run / "summary.txt").is_file()
        assert cli.main(["report", "--out-dir", str(tmp_path / "rep"), str(run)]) == 0
        assert (tmp_path / "rep" / "report.html").is_file()
        out = capsys.readouterr().out
        assert "AUROC" in out

    def test_build_splits_command(self, tmp_path):
        lines = []
        for s in range(5):
            for i in range(3):
                label = "abnormal" if (s + i) % 3 == 0 else "normal"
                lines.append(f"scan{s}\tscan{s}_s{i}\timg/{s}_{i}.png\t{label}")
        scan_list = tmp_path / "scans.txt"
        scan_list.write_text("\n".join(lines) + "\n")
        assert cli.main(["build-splits", "--scan-list", str(scan_list),
                         "--out-dir", str(tmp_path / "out"), "--dataset", "d",
                         "--height", "32", "--width", "32"]) == 0
        manifest = (tmp_path / "out" / "manifest.txt").read_text()
        assert manifest.startswith("dataset=d")

    def test_set_override_applies(self, tmp_path, micro_dataset, capsys):
        cfgfile = tmp_path / "c.cfg"
        micro_config(micro_dataset).save(cfgfile)
        run = tmp_path / "run"
        assert cli.main(["train-mae", "--config", str(cfgfile), "--out-dir",
                         str(run), "--set", "mae_epochs=1"]) == 0
        saved = ExperimentConfig.load(run / "config.txt")
        assert saved.mae_epochs == 1

    def test_failures_exit_nonzero(self, tmp_path, capsys):
        assert cli.main(["evaluate", "--config", "/nonexistent.cfg",
                         "--out-dir", str(tmp_path)]) == 1
        assert "error:" in capsys.readouterr().err
        cfgfile = tmp_path / "c.cfg"
        ExperimentConfig().save(cfgfile)
        assert cli.main(["train-mae", "--config", str(cfgfile), "--out-dir",
                         str(tmp_path / "r"), "--set", "nope=1"]) == 1

    def test_ablate_command(self, tmp_path, micro_dataset):
        cfgfile = tmp_path / "c.cfg"
        micro_config(micro_dataset, classifier_epochs=1, mae_epochs=1).save(cfgfile)
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(cfgfile), "--out-dir",
                         str(out), "--axis", "per_pixel_beta",
                         "--values", "false,true"]) == 0
        assert (out / "ablation_table.txt").is_file()
        assert (out / "ablation_plot.png").is_file()
