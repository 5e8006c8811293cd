"""Evaluation: ROC curves, AUROC, windowed SSIM, and reconstruction-error
baseline scoring (MSE / L1 / 1-SSIM).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import convolve2d

from .data import LABEL_ABNORMAL, LABEL_NORMAL, LabeledSlice
from .mae import MaskedAutoencoder, reconstruct
from .seeding import derive_seed

BASELINE_MEASURES = ("mse", "l1", "ssim")


class ScoredSample(NamedTuple):
    sample_id: str
    score: float
    label: int  # 0 = normal, 1 = abnormal


@dataclass
class ScoredSet:
    """Per-sample anomaly scores with binary labels."""

    entries: list[ScoredSample]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("scored set must be non-empty")
        for entry in self.entries:
            if entry.label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {entry.label!r}")

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{e.sample_id}\t{e.score:.10g}\t{e.label}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ScoredSet":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            sample_id, score, label = line.split("\t")
            entries.append(ScoredSample(sample_id, float(score), int(label)))
        return cls(entries)


@dataclass
class ROCResult:
    """ROC operating points, in descending-threshold order, plus the area."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["threshold\tfpr\ttpr"]
        lines += [f"{t:.10g}\t{f:.10g}\t{r:.10g}"
                  for t, f, r in zip(self.thresholds, self.fpr, self.tpr)]
        lines.append(f"auroc\t{self.auroc:.10g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_both_classes(labels: np.ndarray) -> tuple[int, int]:
    pos = int(labels.sum())
    neg = int(labels.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("ROC requires at least one sample of each class")
    return pos, neg


def roc_curve(scored: ScoredSet) -> ROCResult:
    """ROC with one operating point per distinct score; ties share a point.

    The curve starts at (0, 0) (threshold above every score) and ends at
    (1, 1); the area is the trapezoidal integral over (fpr, tpr).
    """
    scores = scored.scores
    labels = scored.labels
    pos, neg = _check_both_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # indices closing each group of tied scores
    boundary = np.r_[np.nonzero(np.diff(sorted_scores))[0], scores.size - 1]
    tps = np.cumsum(sorted_labels)[boundary]
    fps = 1 + boundary - tps
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    thresholds = np.r_[np.inf, sorted_scores[boundary]]
    area = float(np.trapezoid(tpr, fpr))
    return ROCResult(thresholds=thresholds, fpr=fpr, tpr=tpr, auroc=area)


def auroc(scored: ScoredSet) -> float:
    """Area under the ROC curve (equivalently the rank statistic
    P(score_pos > score_neg) + tie/2)."""
    return roc_curve(scored).auroc


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_RANGE = 1.0


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed structural similarity (Gaussian 11x11, sigma 1.5, K1=0.01,
    K2=0.03, dynamic range 1), averaged over all fully valid windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2D images, got shape {a.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(
            f"image dims {a.shape} smaller than SSIM window {_SSIM_WINDOW}")
    window = _gaussian_window()
    c1 = (_SSIM_K1 * _SSIM_RANGE) ** 2
    c2 = (_SSIM_K2 * _SSIM_RANGE) ** 2
    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    var_a = convolve2d(a * a, window, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, window, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
    ssim_map = (((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(ssim_map.mean())


def reconstruction_error(original: np.ndarray, recon: np.ndarray, measure: str) -> float:
    """Scalar anomaly score from a reconstruction; larger = more anomalous.

    SSIM is flipped to 1 - SSIM so its direction matches the other measures.
    """
    original = np.asarray(original, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if original.shape != recon.shape:
        raise ValueError(f"image shapes differ: {original.shape} vs {recon.shape}")
    if measure == "mse":
        return float(((recon - original) ** 2).mean())
    if measure == "l1":
        return float(np.abs(recon - original).mean())
    if measure == "ssim":
        return 1.0 - ssim(original, recon)
    raise ValueError(f"unknown measure {measure!r} (expected one of {BASELINE_MEASURES})")


def baseline_scores(mae_model: MaskedAutoencoder, slices: Sequence[LabeledSlice],
                    measure: str, *, num_passes: int = 4,
                    replace_visible: bool = True, mask_ratio: float = 0.75,
                    seed: int | None = None) -> ScoredSet:
    """Score each slice by its reconstruction error under ``measure``."""
    if measure not in BASELINE_MEASURES:
        raise ValueError(f"unknown measure {measure!r} (expected one of {BASELINE_MEASURES})")
    if mae_model.trained_epochs == 0:
        raise ValueError("refusing to compute baseline scores with an untrained model")
    entries = []
    for i, s in enumerate(slices):
        per_image_seed = None if seed is None else derive_seed(seed, "baseline", i)
        recon = reconstruct(mae_model, s.image, num_passes=num_passes,
                            replace_visible=replace_visible,
                            mask_ratio=mask_ratio, seed=per_image_seed).image
        value = reconstruction_error(s.image, recon, measure)
        entries.append(ScoredSample(s.sample_id, value, int(s.label == LABEL_ABNORMAL)))
    return ScoredSet(entries)
