"""Masked-autoencoder anomaly detection for 2D image slices.

Pipeline: a ViT masked autoencoder learns to reconstruct normal slices;
pseudo-abnormal training samples are made by multiplying random boxes of
the reconstruction by random intensity factors; a small ViT classifier is
then trained on reconstruction-difference images to output an anomaly
probability per slice.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classifier import (INPUT_MODES, PatchClassifier, bce_loss,
                         build_classifier, load_classifier, make_input, score,
                         train_classifier)
from .config import ConfigError, ExperimentConfig, diff_configs
from .data import (LABEL_ABNORMAL, LABEL_NORMAL, ContaminationError,
                   LabeledSlice, ManifestError, ScanRecord, SliceManifest,
                   SliceRecord, SynthCounts, SynthSpec, build_splits,
                   generate_synth_dataset, load_slice, load_split,
                   normalize_slice, read_scan_list, write_slice)
from .experiment import (AblationResult, IncompleteRunError, RunResult,
                         emit_report, run_ablation, run_experiment)
from .mae import (MaskedAutoencoder, Reconstruction, build_mae, load_mae,
                  masked_loss, reconstruct, save_mae, train_mae)
from .metrics import (ROCResult, ScoredSample, ScoredSet, auroc,
                      baseline_scores, reconstruction_error, roc_curve, ssim)
from .patches import (MaskPlan, PatchSequence, TokenSequence, embed,
                      mask_tokens, patchify, sincos_pos_embed, unpatchify)
from .pseudo import (Box, PerturbationSpec, apply, load_spec, sample_spec,
                     save_spec)
from .seeding import derive_seed

__version__ = "0.1.0"

__all__ = [
    "AblationResult", "Box", "CheckpointError", "ConfigError",
    "ContaminationError", "ExperimentConfig", "INPUT_MODES",
    "IncompleteRunError", "LABEL_ABNORMAL", "LABEL_NORMAL", "LabeledSlice",
    "ManifestError", "MaskPlan", "MaskedAutoencoder", "PatchClassifier",
    "PatchSequence", "PerturbationSpec", "ROCResult", "Reconstruction",
    "RunResult", "ScanRecord", "ScoredSample", "ScoredSet", "SliceManifest",
    "SliceRecord", "SynthCounts", "SynthSpec", "TokenSequence", "apply",
    "auroc", "baseline_scores", "bce_loss", "build_classifier", "build_mae",
    "build_splits", "derive_seed", "diff_configs", "emit_report", "embed",
    "generate_synth_dataset", "load_checkpoint", "load_classifier",
    "load_mae", "load_slice", "load_spec", "load_split", "make_input",
    "mask_tokens", "masked_loss", "normalize_slice", "patchify",
    "read_scan_list", "reconstruct", "reconstruction_error", "roc_curve",
    "run_ablation", "run_experiment", "sample_spec", "save_checkpoint",
    "save_mae", "save_spec", "score", "sincos_pos_embed", "ssim",
    "train_classifier", "train_mae", "unpatchify", "write_slice",
]
