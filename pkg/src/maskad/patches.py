"""Patch tokenization: image <-> patch grid, positional tables, random masking.

All functions here are pure and numpy-based; the torch models build on the
same primitives (identical index conventions) so that mask bookkeeping is
defined in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PatchSequence:
    """A row-major sequence of flattened square patches cut from one image."""

    patches: np.ndarray  # (n, patch_size**2)
    patch_size: int
    grid: tuple[int, int]  # (rows, cols) of the patch grid

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        gh, gw = self.grid
        return gh * self.patch_size, gw * self.patch_size


@dataclass(frozen=True)
class TokenSequence:
    """Embedded patch tokens with their (fixed, sinusoidal) positional table."""

    tokens: np.ndarray  # (n, embed_dim)
    pos: np.ndarray  # (n, embed_dim)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class MaskPlan:
    """A masked/visible partition of token indices {0..n-1}.

    Exactly ``floor(mask_ratio * n)`` indices are masked.  Both index arrays
    are kept in ascending order so visible tokens retain their original
    sequence order and reconstruction placement is unambiguous.
    """

    num_tokens: int
    mask_ratio: float
    masked: np.ndarray = field(repr=False)  # ascending int indices
    visible: np.ndarray = field(repr=False)  # ascending int indices
    seed: int | None = None

    @classmethod
    def sample(cls, num_tokens: int, mask_ratio: float, seed: int | None = None) -> "MaskPlan":
        """Draw a uniform random mask over ``num_tokens`` token positions."""
        if not 0.0 <= mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
        if num_tokens < 1:
            raise ValueError(f"num_tokens must be positive, got {num_tokens}")
        num_masked = int(np.floor(mask_ratio * num_tokens))
        rng = np.random.default_rng(seed)
        order = rng.permutation(num_tokens)
        masked = np.sort(order[:num_masked])
        visible = np.sort(order[num_masked:])
        return cls(num_tokens=num_tokens, mask_ratio=mask_ratio,
                   masked=masked, visible=visible, seed=seed)

    @property
    def num_masked(self) -> int:
        return self.masked.shape[0]

    @property
    def num_visible(self) -> int:
        return self.visible.shape[0]

    def validate(self) -> None:
        """Check the partition invariants; raises ValueError on violation."""
        combined = np.concatenate([self.masked, self.visible])
        if combined.shape[0] != self.num_tokens or np.intersect1d(self.masked, self.visible).size:
            raise ValueError("masked/visible do not partition the token indices")
        if not np.array_equal(np.sort(combined), np.arange(self.num_tokens)):
            raise ValueError("masked/visible do not cover all token indices")
        if self.num_masked != int(np.floor(self.mask_ratio * self.num_tokens)):
            raise ValueError("masked count does not match floor(mask_ratio * n)")


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut an H x W image into non-overlapping p x p patches, row-major.

    The pixel values are copied verbatim; ``unpatchify`` inverts this exactly.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {image.shape}")
    h, w = image.shape
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if h % patch_size or w % patch_size:
        raise ValueError(
            f"image dims {h}x{w} are not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (image.reshape(gh, patch_size, gw, patch_size)
               .transpose(0, 2, 1, 3)
               .reshape(gh * gw, patch_size * patch_size))
    return PatchSequence(patches=patches, patch_size=patch_size, grid=(gh, gw))


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Reassemble patches into the image; exact inverse of ``patchify``."""
    gh, gw = seq.grid
    p = seq.patch_size
    n, flat = seq.patches.shape
    if n != gh * gw or flat != p * p:
        raise ValueError(
            f"patch array {seq.patches.shape} inconsistent with grid {seq.grid} "
            f"and patch_size {p}")
    return (seq.patches.reshape(gh, gw, p, p)
            .transpose(0, 2, 1, 3)
            .reshape(gh * p, gw * p))


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    """Standard sine/cosine table over integer positions (float64)."""
    if dim % 2:
        raise ValueError(f"sinusoidal dim must be even, got {dim}")
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed(grid: tuple[int, int], embed_dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine positional table for a patch grid.

    Half the channels encode the row coordinate, half the column, each with
    the standard 1/10000^(2i/d) frequencies.  Deterministic float64 output.
    """
    if embed_dim % 4:
        raise ValueError(f"embed_dim must be divisible by 4, got {embed_dim}")
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    emb_h = _sincos_1d(embed_dim // 2, rows.reshape(-1))
    emb_w = _sincos_1d(embed_dim // 2, cols.reshape(-1))
    return np.concatenate([emb_h, emb_w], axis=1)


def embed(seq: PatchSequence, weight: np.ndarray, bias: np.ndarray | None = None) -> TokenSequence:
    """Linearly project patches to embedding space and add the positional table.

    ``weight`` has shape (embed_dim, patch_size**2); row i of the output
    depends only on patch i.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != seq.patch_size ** 2:
        raise ValueError(
            f"projection shape {weight.shape} does not map "
            f"patch_size**2={seq.patch_size ** 2} to an embedding")
    embed_dim = weight.shape[0]
    projected = seq.patches.astype(np.float64) @ weight.T
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (embed_dim,):
            raise ValueError(f"bias shape {bias.shape} != ({embed_dim},)")
        projected = projected + bias
    pos = sincos_pos_embed(seq.grid, embed_dim)
    return TokenSequence(tokens=projected + pos, pos=pos)


def mask_tokens(seq: TokenSequence, mask_ratio: float, seed: int | None = None
                ) -> tuple[TokenSequence, MaskPlan]:
    """Drop a random ``mask_ratio`` fraction of token rows.

    Returns the visible sub-sequence (original order preserved) and the plan
    recording the partition.
    """
    plan = MaskPlan.sample(seq.num_tokens, mask_ratio, seed=seed)
    visible = TokenSequence(tokens=seq.tokens[plan.visible], pos=seq.pos[plan.visible])
    return visible, plan
