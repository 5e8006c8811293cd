"""Pseudo-abnormal sample synthesis.

Positives for the anomaly classifier are fabricated by darkening random
rectangular regions of a reconstruction: k boxes, each with its pixel
intensities multiplied by a factor drawn uniformly from [0, 1).  An ablation
flag swaps the single per-box factor for an independent per-pixel matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned region (x = column, y = row) with its intensity factor.

    ``beta`` is a scalar, or an (h, w) matrix in per-pixel mode.
    """

    x: int
    y: int
    w: int
    h: int
    beta: float | np.ndarray

    def bounds_check(self, height: int, width: int) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate box {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(
                f"box at ({self.x}, {self.y}) size {self.w}x{self.h} exceeds "
                f"image bounds {width}x{height}")
        if isinstance(self.beta, np.ndarray) and self.beta.shape != (self.h, self.w):
            raise ValueError(
                f"per-pixel beta shape {self.beta.shape} != box ({self.h}, {self.w})")


@dataclass(frozen=True)
class PerturbationSpec:
    """The full recipe for one pseudo-abnormal sample."""

    boxes: tuple[Box, ...]
    k_range: tuple[int, int]
    size_range: tuple[int, int]
    per_pixel_beta: bool = False
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.boxes)


def sample_spec(image_dims: tuple[int, int], k_range: tuple[int, int] = (1, 10),
                size_range: tuple[int, int] = (10, 40), seed: int | None = None,
                per_pixel_beta: bool = False) -> PerturbationSpec:
    """Draw a random perturbation recipe.

    k is uniform on [k1, k2]; box width/height are independent uniform
    integers in the size range; positions are uniform with full containment;
    every intensity factor is uniform on [0, 1).
    """
    height, width = image_dims
    k1, k2 = k_range
    s_min, s_max = size_range
    if k1 < 1 or k2 < k1:
        raise ValueError(f"invalid k_range {k_range}")
    if s_min < 1 or s_max < s_min:
        raise ValueError(f"invalid size_range {size_range}")
    if s_max > height or s_max > width:
        raise ValueError(
            f"size_range {size_range} does not fit image dims {image_dims}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(k1, k2 + 1))
    boxes = []
    for _ in range(k):
        w = int(rng.integers(s_min, s_max + 1))
        h = int(rng.integers(s_min, s_max + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        beta = rng.random((h, w)) if per_pixel_beta else float(rng.random())
        boxes.append(Box(x=x, y=y, w=w, h=h, beta=beta))
    return PerturbationSpec(boxes=tuple(boxes), k_range=(k1, k2),
                            size_range=(s_min, s_max),
                            per_pixel_beta=per_pixel_beta, seed=seed)


def apply(recon: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Multiply each box region by its factor; overlaps compose in list order.

    Every pixel outside all boxes is bit-identical to the input.
    """
    recon = np.asarray(recon, dtype=np.float64)
    if recon.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {recon.shape}")
    height, width = recon.shape
    out = recon.copy()
    for box in spec.boxes:
        box.bounds_check(height, width)
        out[box.y:box.y + box.h, box.x:box.x + box.w] *= box.beta
    return out


def save_spec(spec: PerturbationSpec, path: str | Path) -> None:
    """Serialize a spec as line-delimited text, one box per line."""
    lines = [
        "\t".join([
            f"k_range={spec.k_range[0]},{spec.k_range[1]}",
            f"size_range={spec.size_range[0]},{spec.size_range[1]}",
            f"per_pixel_beta={int(spec.per_pixel_beta)}",
            f"seed={'' if spec.seed is None else spec.seed}",
        ])
    ]
    for box in spec.boxes:
        beta = (",".join(repr(float(v)) for v in np.asarray(box.beta).ravel())
                if isinstance(box.beta, np.ndarray) else repr(float(box.beta)))
        lines.append(f"{box.x}\t{box.y}\t{box.w}\t{box.h}\t{beta}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_spec(path: str | Path) -> PerturbationSpec:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"empty perturbation spec file: {path}")
    header = dict(item.split("=", 1) for item in lines[0].split("\t"))
    k_range = tuple(int(v) for v in header["k_range"].split(","))
    size_range = tuple(int(v) for v in header["size_range"].split(","))
    per_pixel = bool(int(header["per_pixel_beta"]))
    seed = int(header["seed"]) if header["seed"] else None
    boxes = []
    for line in lines[1:]:
        if not line.strip():
            continue
        x, y, w, h, beta_text = line.split("\t")
        values = [float(v) for v in beta_text.split(",")]
        beta: float | np.ndarray
        if per_pixel:
            beta = np.array(values).reshape(int(h), int(w))
        else:
            (beta,) = values
        boxes.append(Box(x=int(x), y=int(y), w=int(w), h=int(h), beta=beta))
    return PerturbationSpec(boxes=tuple(boxes), k_range=k_range,  # type: ignore[arg-type]
                            size_range=size_range, per_pixel_beta=per_pixel,
                            seed=seed)
