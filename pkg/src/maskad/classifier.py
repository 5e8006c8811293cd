"""Supervised anomaly classifier.

A small ViT scores the difference between an image and its reconstruction.
Negatives are the reconstructions of normal slices; positives come from the
pseudo-abnormal module, paired 1:1 with their negatives inside each batch.
The output is P(abnormal), trained with binary cross-entropy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import pseudo
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledSlice, ensure_normal_only
from .mae import (Block, MaskedAutoencoder, _batched, _init_transformer_weights,
                  _load_optimizer_arrays, _MetricsLog, _optimizer_arrays,
                  _state_arrays, reconstruct, _LN_EPS)
from .patches import sincos_pos_embed
from .seeding import derive_seed

SCORE_EPS = 1e-7

INPUT_MODES = ("abs_diff", "squared_diff", "raw_recon", "raw_image")


def make_input(original: np.ndarray, recon: np.ndarray, mode: str) -> np.ndarray:
    """Build the classifier input from an image and its reconstruction.

    abs_diff -> |recon - original|, squared_diff -> (recon - original)**2,
    raw_recon -> the reconstruction unchanged.
    """
    original = np.asarray(original, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if original.shape != recon.shape:
        raise ValueError(
            f"image shapes differ: {original.shape} vs {recon.shape}")
    if mode == "abs_diff":
        return np.abs(recon - original)
    if mode == "squared_diff":
        return (recon - original) ** 2
    if mode == "raw_recon":
        return recon.copy()
    raise ValueError(f"unknown input mode {mode!r} (expected one of "
                     f"{', '.join(INPUT_MODES[:3])})")


def bce_loss(labels, scores, eps: float = SCORE_EPS) -> float:
    """Binary cross-entropy, averaged over the batch.

    Scores are clamped to [eps, 1 - eps] so exact 0/1 predictions cannot
    produce infinities.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    if labels.shape != scores.shape:
        raise ValueError(f"label shape {labels.shape} != score shape {scores.shape}")
    losses = -(labels * np.log(scores) + (1.0 - labels) * np.log1p(-scores))
    return float(losses.mean())


def _bce_torch(labels: torch.Tensor, scores: torch.Tensor,
               eps: float = SCORE_EPS) -> torch.Tensor:
    scores = scores.clamp(eps, 1.0 - eps)
    return (-(labels * torch.log(scores) + (1.0 - labels) * torch.log1p(-scores))).mean()


class PatchClassifier(nn.Module):
    """ViT over patch tokens with mean pooling and a single-logit head."""

    def __init__(self, image_size: tuple[int, int], patch_size: int,
                 embed_dim: int = 128, depth: int = 4, num_heads: int = 4,
                 mlp_ratio: float = 4.0) -> None:
        super().__init__()
        h, w = image_size
        if h % patch_size or w % patch_size:
            raise ValueError(
                f"image dims {h}x{w} not divisible by patch_size {patch_size}")
        self.image_size = (h, w)
        self.patch_size = patch_size
        self.grid = (h // patch_size, w // patch_size)
        self.num_tokens = self.grid[0] * self.grid[1]
        self.embed_dim = embed_dim
        self.input_mode: str | None = None
        self.trained_epochs = 0

        self.patch_embed = nn.Linear(patch_size * patch_size, embed_dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_pos_embed(self.grid, embed_dim)).float()[None])
        self.blocks = nn.ModuleList(
            [Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim, eps=_LN_EPS)
        self.head = nn.Linear(embed_dim, 1)
        self.apply(_init_transformer_weights)

    @property
    def arch(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": len(self.blocks),
            "num_heads": self.blocks[0].attn.num_heads,
            "mlp_ratio": self.blocks[0].mlp[0].out_features / self.embed_dim,
        }

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) inputs -> (B,) logits."""
        b = images.shape[0]
        if images.shape[1:] != torch.Size(self.image_size):
            raise ValueError(
                f"input shape {tuple(images.shape[1:])} != classifier "
                f"image size {self.image_size}")
        gh, gw = self.grid
        p = self.patch_size
        x = (images.reshape(b, gh, p, gw, p)
             .permute(0, 1, 3, 2, 4)
             .reshape(b, self.num_tokens, p * p))
        x = self.patch_embed(x) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x).mean(dim=1)
        return self.head(x).squeeze(-1)

    def probabilities(self, images: torch.Tensor) -> torch.Tensor:
        """Sigmoid scores clamped strictly inside (0, 1)."""
        return torch.sigmoid(self.forward(images)).clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def build_classifier(image_size: tuple[int, int], patch_size: int, *,
                     embed_dim: int, depth: int, num_heads: int,
                     mlp_ratio: float = 4.0,
                     init_seed: int | None = None) -> PatchClassifier:
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return PatchClassifier(image_size, patch_size, embed_dim=embed_dim,
                           depth=depth, num_heads=num_heads, mlp_ratio=mlp_ratio)


@dataclass
class ClassifierHistory:
    losses: list[float]
    accuracies: list[float]
    wall_times: list[float]

    @property
    def epochs(self) -> int:
        return len(self.losses)


def save_classifier(path: str | Path, model: PatchClassifier, *, epoch: int,
                    experiment_config: dict, loss_history: Sequence[float] = (),
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    if model.input_mode is None:
        raise ValueError("classifier has no input_mode set; train it first")
    arrays = _state_arrays(model)
    if optimizer is not None:
        arrays.update(_optimizer_arrays(model, optimizer))
    meta = {
        "kind": "classifier",
        "epoch": int(epoch),
        "arch": model.arch,
        "input_mode": model.input_mode,
        "experiment_config": experiment_config,
        "loss_history": list(map(float, loss_history)),
    }
    save_checkpoint(path, arrays, meta)


def load_classifier(path: str | Path) -> tuple[PatchClassifier, dict, dict[str, np.ndarray]]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    arch = meta["arch"]
    model = PatchClassifier(
        tuple(arch["image_size"]), arch["patch_size"], embed_dim=arch["embed_dim"],
        depth=arch["depth"], num_heads=arch["num_heads"], mlp_ratio=arch["mlp_ratio"])
    state = {name: torch.from_numpy(arr.copy())
             for name, arr in arrays.items() if not name.startswith("opt.")}
    model.load_state_dict(state)
    model.input_mode = meta["input_mode"]
    model.trained_epochs = meta["epoch"]
    return model, meta, arrays


def _positive_input(slice_image: np.ndarray, recon: np.ndarray | None, cfg,
                    spec: pseudo.PerturbationSpec) -> np.ndarray:
    """Pseudo-abnormal classifier input for one normal sample."""
    if cfg.no_mae:
        return pseudo.apply(slice_image, spec)
    altered = pseudo.apply(recon, spec)
    return make_input(slice_image, altered, cfg.input_mode)


def train_classifier(model: PatchClassifier, mae_model: MaskedAutoencoder | None,
                     slices: Sequence[LabeledSlice], cfg, *,
                     out_dir: str | Path | None = None,
                     resume_from: str | Path | None = None) -> ClassifierHistory:
    """Train the anomaly classifier on paired normal / pseudo-abnormal inputs.

    Each normal sample contributes one negative (its reconstruction
    difference) and one freshly perturbed positive per epoch, so batches are
    exactly balanced.
    """
    ensure_normal_only(slices, "classifier")
    if not slices:
        raise ValueError("empty training set")
    if not cfg.no_mae:
        if mae_model is None:
            raise ValueError("a trained masked autoencoder is required "
                             "(or set no_mae to train on raw images)")
        if mae_model.trained_epochs == 0:
            raise ValueError("masked autoencoder is untrained")

    if cfg.no_mae:
        recons: list[np.ndarray | None] = [None] * len(slices)
        negatives = [s.image.astype(np.float64) for s in slices]
        model.input_mode = "raw_image"
    else:
        recons = [reconstruct(mae_model, s.image, num_passes=cfg.num_passes,
                              replace_visible=cfg.replace_visible,
                              mask_ratio=cfg.mask_ratio,
                              seed=derive_seed(cfg.seed, "clf-recon", i)).image
                  for i, s in enumerate(slices)]
        negatives = [make_input(s.image, r, cfg.input_mode)
                     for s, r in zip(slices, recons)]
        model.input_mode = cfg.input_mode

    neg_inputs = torch.from_numpy(np.stack(negatives)).float()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.classifier_lr,
                                  weight_decay=cfg.classifier_weight_decay)
    out_dir = Path(out_dir) if out_dir else None
    log = _MetricsLog(out_dir / "logs" / "classifier_train.log" if out_dir else None)

    start_epoch = 0
    losses: list[float] = []
    accuracies: list[float] = []
    wall_times: list[float] = []
    if resume_from is not None:
        resumed, meta, arrays = load_classifier(resume_from)
        model.load_state_dict(resumed.state_dict())
        model.input_mode = meta["input_mode"]
        _load_optimizer_arrays(model, optimizer, arrays)
        start_epoch = meta["epoch"]
        losses = list(meta.get("loss_history", []))

    dims = model.image_size
    num = len(slices)
    model.train()
    for epoch in range(start_epoch, cfg.classifier_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            derive_seed(cfg.seed, "clf-order", epoch)).permutation(num)
        pseudo_epoch = epoch if cfg.resample_pseudo else 0
        epoch_loss = 0.0
        correct = 0
        for batch in _batched(order, cfg.classifier_batch_size):
            positives = []
            for i in batch:
                spec = pseudo.sample_spec(
                    dims, (cfg.k_min, cfg.k_max), (cfg.box_min, cfg.box_max),
                    seed=derive_seed(cfg.seed, "pseudo", pseudo_epoch, int(i)),
                    per_pixel_beta=cfg.per_pixel_beta)
                positives.append(_positive_input(slices[i].image, recons[i], cfg, spec))
            idx = torch.from_numpy(batch.copy())
            x = torch.cat([neg_inputs[idx],
                           torch.from_numpy(np.stack(positives)).float()])
            y = torch.cat([torch.zeros(len(batch)), torch.ones(len(batch))])
            probs = model.probabilities(x)
            loss = _bce_torch(y, probs)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch) * 2
            correct += int(((probs > 0.5).float() == y).sum())
        elapsed = time.perf_counter() - t0
        losses.append(epoch_loss / (2 * num))
        accuracies.append(correct / (2 * num))
        wall_times.append(elapsed)
        log.write({"epoch": epoch + 1, "loss": losses[-1],
                   "accuracy": accuracies[-1], "wall_time": elapsed})
        if (out_dir and cfg.checkpoint_every
                and (epoch + 1) % cfg.checkpoint_every == 0
                and epoch + 1 < cfg.classifier_epochs):
            save_classifier(out_dir / "checkpoints" / f"classifier_{epoch + 1:05d}.npz",
                            model, epoch=epoch + 1, experiment_config=cfg.to_dict(),
                            loss_history=losses, optimizer=optimizer)

    model.trained_epochs = cfg.classifier_epochs
    model.eval()
    if out_dir:
        save_classifier(out_dir / "checkpoints" / "classifier_final.npz", model,
                        epoch=cfg.classifier_epochs, experiment_config=cfg.to_dict(),
                        loss_history=losses, optimizer=optimizer)
    return ClassifierHistory(losses=losses, accuracies=accuracies,
                             wall_times=wall_times)


def score(classifier: PatchClassifier, mae_model: MaskedAutoencoder | None,
          image: np.ndarray, *, mode: str | None = None, num_passes: int = 4,
          replace_visible: bool = True, mask_ratio: float = 0.75,
          seed: int | None = None) -> float:
    """Anomaly score in (0, 1): the probability the sample is abnormal.

    The reconstruction uses seeded masks, so a fixed seed makes the score
    deterministic.  Requesting a mode other than the one the classifier was
    trained with is refused.
    """
    if classifier.input_mode is None:
        raise ValueError("classifier is untrained (no input mode recorded)")
    if mode is not None and mode != classifier.input_mode:
        raise ValueError(
            f"classifier was trained with input mode {classifier.input_mode!r}; "
            f"refusing to score with {mode!r}")
    image = np.asarray(image, dtype=np.float64)
    if classifier.input_mode == "raw_image":
        x = image
    else:
        if mae_model is None:
            raise ValueError("scoring requires the masked autoencoder used in training")
        recon = reconstruct(mae_model, image, num_passes=num_passes,
                            replace_visible=replace_visible,
                            mask_ratio=mask_ratio, seed=seed).image
        x = make_input(image, recon, classifier.input_mode)
    classifier.eval()
    with torch.no_grad():
        prob = classifier.probabilities(torch.from_numpy(x).float().unsqueeze(0))
    return float(prob[0])
