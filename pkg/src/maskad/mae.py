"""Masked autoencoder: ViT encoder over visible tokens, lightweight decoder
with a learned mask token, masked-token reconstruction loss, training loop,
and multi-pass averaged inference reconstruction.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledSlice, ensure_normal_only
from .patches import MaskPlan, PatchSequence, patchify, sincos_pos_embed, unpatchify
from .seeding import derive_seed

_LN_EPS = 1e-6


class Attention(nn.Module):
    """Multi-head self-attention with a combined qkv projection."""

    def __init__(self, dim: int, num_heads: int, qkv_bias: bool = True) -> None:
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (self.qkv(x)
               .reshape(b, n, 3, self.num_heads, c // self.num_heads)
               .permute(2, 0, 3, 1, 4))
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block (attention + MLP, GELU)."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=_LN_EPS)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=_LN_EPS)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_transformer_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.zeros_(module.bias)
        nn.init.ones_(module.weight)


def _stack_plans(plans: Sequence[MaskPlan], num_tokens: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Validate a batch of plans and stack their index arrays."""
    n_vis = plans[0].num_visible
    for plan in plans:
        if plan.num_tokens != num_tokens:
            raise ValueError(
                f"plan covers {plan.num_tokens} tokens, model expects {num_tokens}")
        if plan.num_visible != n_vis:
            raise ValueError("all plans in a batch must share the same mask ratio")
    visible = torch.from_numpy(np.stack([p.visible for p in plans])).long()
    masked = torch.from_numpy(np.stack([p.masked for p in plans])).long()
    return visible, masked


class MaskedAutoencoder(nn.Module):
    """Asymmetric encoder/decoder over patch tokens.

    The encoder only ever sees visible tokens; the decoder receives the
    encoded tokens re-placed at their positions with a single learned mask
    token filling every masked slot, plus its own positional table.
    """

    def __init__(self, image_size: tuple[int, int], patch_size: int,
                 embed_dim: int = 128, depth: int = 4, num_heads: int = 4,
                 decoder_embed_dim: int = 64, decoder_depth: int = 2,
                 decoder_num_heads: int = 4, mlp_ratio: float = 4.0) -> None:
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
        self.decoder_embed_dim = decoder_embed_dim
        self.trained_epochs = 0

        self.patch_embed = nn.Linear(patch_size * patch_size, embed_dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_pos_embed(self.grid, embed_dim)).float()[None])
        self.blocks = nn.ModuleList(
            [Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim, eps=_LN_EPS)

        self.decoder_embed = nn.Linear(embed_dim, decoder_embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decoder_embed_dim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(sincos_pos_embed(self.grid, decoder_embed_dim)).float()[None])
        self.decoder_blocks = nn.ModuleList(
            [Block(decoder_embed_dim, decoder_num_heads, mlp_ratio)
             for _ in range(decoder_depth)])
        self.decoder_norm = nn.LayerNorm(decoder_embed_dim, eps=_LN_EPS)
        self.head = nn.Linear(decoder_embed_dim, patch_size * patch_size)

        self.apply(_init_transformer_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    @property
    def arch(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": len(self.blocks),
            "num_heads": self.blocks[0].attn.num_heads,
            "decoder_embed_dim": self.decoder_embed_dim,
            "decoder_depth": len(self.decoder_blocks),
            "decoder_num_heads": self.decoder_blocks[0].attn.num_heads,
            "mlp_ratio": self.blocks[0].mlp[0].out_features / self.embed_dim,
        }

    def patchify_images(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) pixels -> (B, n, p*p) row-major patches."""
        b = images.shape[0]
        if images.shape[1:] != torch.Size(self.image_size):
            raise ValueError(
                f"image batch shape {tuple(images.shape[1:])} != model "
                f"image size {self.image_size}")
        gh, gw = self.grid
        p = self.patch_size
        return (images.reshape(b, gh, p, gw, p)
                .permute(0, 1, 3, 2, 4)
                .reshape(b, self.num_tokens, p * p))

    def tokenize(self, images: torch.Tensor) -> torch.Tensor:
        """Project patches into embedding space and add positions."""
        return self.patch_embed(self.patchify_images(images)) + self.pos_embed

    def encode(self, tokens: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        """Run the encoder over visible tokens only."""
        visible_idx, _ = _stack_plans(plans, self.num_tokens)
        gather = visible_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        x = torch.gather(tokens, 1, gather)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def decoder_tokens(self, encoded: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        """Place encoded tokens at visible slots, the mask token at masked
        slots, and add the decoder positional table."""
        visible_idx, _ = _stack_plans(plans, self.num_tokens)
        b = encoded.shape[0]
        z = self.mask_token.expand(b, self.num_tokens, -1).clone()
        scatter = visible_idx.unsqueeze(-1).expand(-1, -1, self.decoder_embed_dim)
        z = z.scatter(1, scatter, self.decoder_embed(encoded))
        return z + self.decoder_pos_embed

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        for block in self.decoder_blocks:
            z = block(z)
        return self.head(self.decoder_norm(z))

    def forward_tokens(self, tokens: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        encoded = self.encode(tokens, plans)
        return self.decode(self.decoder_tokens(encoded, plans))

    def forward(self, images: torch.Tensor, plans: Sequence[MaskPlan]) -> torch.Tensor:
        """Predict all patch pixels (B, n, p*p) from masked views of images."""
        return self.forward_tokens(self.tokenize(images), plans)


def build_mae(image_size: tuple[int, int], patch_size: int, *, embed_dim: int,
              depth: int, num_heads: int, decoder_embed_dim: int,
              decoder_depth: int, decoder_num_heads: int, mlp_ratio: float = 4.0,
              init_seed: int | None = None) -> MaskedAutoencoder:
    """Construct a model with deterministic parameter initialization."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return MaskedAutoencoder(
        image_size, patch_size, embed_dim=embed_dim, depth=depth,
        num_heads=num_heads, decoder_embed_dim=decoder_embed_dim,
        decoder_depth=decoder_depth, decoder_num_heads=decoder_num_heads,
        mlp_ratio=mlp_ratio)


def masked_loss(pred, target, plans, *, loss_on_all_tokens: bool = False) -> torch.Tensor:
    """Reconstruction loss: per-patch pixel MSE averaged over masked patches.

    Gradients with respect to visible-position predictions are exactly zero
    unless ``loss_on_all_tokens`` is set, in which case every patch
    contributes.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if pred.dim() == 2:
        pred = pred.unsqueeze(0)
        target = target.unsqueeze(0)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    per_patch = ((pred - target) ** 2).mean(dim=-1)  # (B, n)
    if loss_on_all_tokens:
        return per_patch.mean()
    _, masked_idx = _stack_plans(plans, pred.shape[1])
    if masked_idx.shape[1] == 0:
        raise ValueError(
            "masked reconstruction loss is undefined with zero masked tokens; "
            "enable loss_on_all_tokens for unmasked training")
    return torch.gather(per_patch, 1, masked_idx).mean()


@dataclass
class TrainingHistory:
    """Per-epoch loss curve (and wall time) for one training stage."""

    losses: list[float]
    wall_times: list[float]

    @property
    def epochs(self) -> int:
        return len(self.losses)


@dataclass
class Reconstruction:
    """Averaged multi-pass reconstruction of one image."""

    image: np.ndarray  # (H, W) in [0, 1]
    passes: np.ndarray  # (num_passes, H, W)
    num_passes: int
    replace_visible: bool


def _batched(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


class _MetricsLog:
    """Line-delimited JSON metrics writer (no-op when path is None)."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def _state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().copy()
            for name, tensor in model.state_dict().items()}


def _optimizer_arrays(model: nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    names = {id(p): name for name, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if not state:
                continue
            name = names[id(param)]
            arrays[f"opt.{name}.step"] = np.asarray(float(state["step"]))
            arrays[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
            arrays[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
    return arrays


def _load_optimizer_arrays(model: nn.Module, optimizer: torch.optim.Optimizer,
                           arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for name, param in params.items():
        key = f"opt.{name}.step"
        if key not in arrays:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(np.asarray(arrays[key]).reshape(()).item(),
                                 dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()),
        }


def save_mae(path: str | Path, model: MaskedAutoencoder, *, epoch: int,
             experiment_config: dict, loss_history: Sequence[float] = (),
             optimizer: torch.optim.Optimizer | None = None) -> None:
    """Persist model (and optionally optimizer) state with a config snapshot."""
    arrays = _state_arrays(model)
    if optimizer is not None:
        arrays.update(_optimizer_arrays(model, optimizer))
    meta = {
        "kind": "mae",
        "epoch": int(epoch),
        "arch": model.arch,
        "experiment_config": experiment_config,
        "loss_history": list(map(float, loss_history)),
    }
    save_checkpoint(path, arrays, meta)


def load_mae(path: str | Path) -> tuple[MaskedAutoencoder, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, meta, raw arrays)."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "mae":
        raise ValueError(f"{path} is not a masked-autoencoder checkpoint")
    arch = meta["arch"]
    model = MaskedAutoencoder(
        tuple(arch["image_size"]), arch["patch_size"], embed_dim=arch["embed_dim"],
        depth=arch["depth"], num_heads=arch["num_heads"],
        decoder_embed_dim=arch["decoder_embed_dim"],
        decoder_depth=arch["decoder_depth"],
        decoder_num_heads=arch["decoder_num_heads"], mlp_ratio=arch["mlp_ratio"])
    state = {name: torch.from_numpy(arr.copy())
             for name, arr in arrays.items() if not name.startswith("opt.")}
    model.load_state_dict(state)
    model.trained_epochs = meta["epoch"]
    return model, meta, arrays


def train_mae(model: MaskedAutoencoder, slices: Sequence[LabeledSlice], cfg,
              *, out_dir: str | Path | None = None,
              resume_from: str | Path | None = None) -> TrainingHistory:
    """Optimize the masked reconstruction loss over normal slices.

    A fresh random mask is drawn per image per epoch; every draw is derived
    from ``cfg.seed`` so runs (and resumes from periodic checkpoints) are
    reproducible.
    """
    ensure_normal_only(slices, "autoencoder")
    if not slices:
        raise ValueError("empty training set")
    n = model.num_tokens
    num_masked = int(np.floor(cfg.mask_ratio * n))
    if num_masked == 0 and not cfg.loss_on_all_tokens:
        raise ValueError(
            f"mask_ratio {cfg.mask_ratio} masks zero of {n} tokens; "
            "the masked loss is undefined (use loss_on_all_tokens)")

    images = torch.from_numpy(np.stack([s.image for s in slices])).float()
    targets = model.patchify_images(images)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.mae_lr,
                                  weight_decay=cfg.mae_weight_decay)
    out_dir = Path(out_dir) if out_dir else None
    log = _MetricsLog(out_dir / "logs" / "mae_train.log" if out_dir else None)

    start_epoch = 0
    losses: list[float] = []
    wall_times: list[float] = []
    if resume_from is not None:
        resumed, meta, arrays = load_mae(resume_from)
        model.load_state_dict(resumed.state_dict())
        _load_optimizer_arrays(model, optimizer, arrays)
        start_epoch = meta["epoch"]
        losses = list(meta.get("loss_history", []))

    model.train()
    num = len(slices)
    for epoch in range(start_epoch, cfg.mae_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            derive_seed(cfg.seed, "mae-order", epoch)).permutation(num)
        epoch_loss = 0.0
        for batch in _batched(order, cfg.mae_batch_size):
            plans = [MaskPlan.sample(n, cfg.mask_ratio,
                                     derive_seed(cfg.seed, "mae-mask", epoch, int(i)))
                     for i in batch]
            idx = torch.from_numpy(batch.copy())
            pred = model(images[idx], plans)
            loss = masked_loss(pred, targets[idx], plans,
                               loss_on_all_tokens=cfg.loss_on_all_tokens)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        elapsed = time.perf_counter() - t0
        losses.append(epoch_loss / num)
        wall_times.append(elapsed)
        log.write({"epoch": epoch + 1, "loss": losses[-1], "wall_time": elapsed})
        if (out_dir and cfg.checkpoint_every
                and (epoch + 1) % cfg.checkpoint_every == 0
                and epoch + 1 < cfg.mae_epochs):
            save_mae(out_dir / "checkpoints" / f"mae_{epoch + 1:05d}.npz", model,
                     epoch=epoch + 1, experiment_config=cfg.to_dict(),
                     loss_history=losses, optimizer=optimizer)

    model.trained_epochs = cfg.mae_epochs
    model.eval()
    if out_dir:
        save_mae(out_dir / "checkpoints" / "mae_final.npz", model,
                 epoch=cfg.mae_epochs, experiment_config=cfg.to_dict(),
                 loss_history=losses, optimizer=optimizer)
    return TrainingHistory(losses=losses, wall_times=wall_times)


def reconstruct(model: MaskedAutoencoder, image: np.ndarray, *,
                num_passes: int = 4, replace_visible: bool = True,
                mask_ratio: float = 0.75, seed: int | None = None) -> Reconstruction:
    """Reconstruct an image as the pixel-wise mean of independent masked passes.

    Each pass draws its own mask, predicts every patch, and (by default)
    overwrites visible-patch predictions with the original pixels.
    """
    if num_passes < 1:
        raise ValueError(f"num_passes must be >= 1, got {num_passes}")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.image_size:
        raise ValueError(
            f"image shape {image.shape} != model image size {model.image_size}")
    target = patchify(image, model.patch_size)
    t_image = torch.from_numpy(image).float().unsqueeze(0)
    model.eval()
    passes = []
    with torch.no_grad():
        tokens = model.tokenize(t_image)
        for i in range(num_passes):
            pass_seed = None if seed is None else derive_seed(seed, "recon-pass", i)
            plan = MaskPlan.sample(model.num_tokens, mask_ratio, pass_seed)
            pred = model.forward_tokens(tokens, [plan])[0].double().numpy()
            if replace_visible:
                pred[plan.visible] = target.patches[plan.visible]
            recon = unpatchify(PatchSequence(pred, model.patch_size, model.grid))
            passes.append(np.clip(recon, 0.0, 1.0))
    stacked = np.stack(passes)
    return Reconstruction(image=stacked.mean(axis=0), passes=stacked,
                          num_passes=num_passes, replace_visible=replace_visible)
