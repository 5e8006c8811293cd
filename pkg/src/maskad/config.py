"""Experiment configuration: a flat, typed key=value file format.

Unknown keys are hard errors so a misspelled hyper-parameter can never
silently fall back to a default.  ``resolve()`` applies the cross-field
couplings (autoencoder mode implies an unmasked, single-pass pipeline) and
validates ranges.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

INPUT_MODES = ("abs_diff", "squared_diff", "raw_recon")
ANOMALY_MEASURES = ("classifier", "mse", "l1", "ssim")


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    """All knobs for one end-to-end run.

    Defaults are the full-scale settings (224x224 inputs, ViT-Base encoder
    and classifier, 1600 reconstruction epochs); desk-scale files under
    configs/ override the sizes for quick runs.
    """

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    dataset_manifest: str = ""

    # geometry
    image_height: int = 224
    image_width: int = 224
    patch_size: int = 16

    # masked autoencoder
    mask_ratio: float = 0.75
    mae_embed_dim: int = 768
    mae_depth: int = 12
    mae_num_heads: int = 12
    mae_decoder_embed_dim: int = 512
    mae_decoder_depth: int = 8
    mae_decoder_num_heads: int = 16
    mlp_ratio: float = 4.0
    mae_epochs: int = 1600
    mae_lr: float = 0.001
    mae_weight_decay: float = 0.05
    mae_batch_size: int = 16
    loss_on_all_tokens: bool = False

    # averaged inference reconstruction
    num_passes: int = 4
    replace_visible: bool = True

    # pseudo-abnormal sampling
    k_min: int = 1
    k_max: int = 10
    box_min: int = 10
    box_max: int = 40
    per_pixel_beta: bool = False
    resample_pseudo: bool = True

    # anomaly classifier
    clf_embed_dim: int = 768
    clf_depth: int = 12
    clf_num_heads: int = 12
    classifier_epochs: int = 100
    classifier_lr: float = 0.001
    classifier_weight_decay: float = 0.05
    classifier_batch_size: int = 16
    input_mode: str = "abs_diff"

    # ablation switches
    ae_mode: bool = False
    no_mae: bool = False

    # evaluation / bookkeeping
    anomaly_measure: str = "classifier"
    checkpoint_every: int = 100

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    def resolve(self) -> "ExperimentConfig":
        """Validated copy with cross-field couplings applied.

        Autoencoder mode (``ae_mode`` or a zero mask ratio) disables masking
        entirely: the loss covers every token, nothing is replaced at
        inference, and a single pass suffices because passes are identical.
        """
        cfg = dataclasses.replace(self)
        if cfg.ae_mode or cfg.mask_ratio == 0.0:
            cfg.ae_mode = True
            cfg.mask_ratio = 0.0
            cfg.loss_on_all_tokens = True
            cfg.replace_visible = False
            cfg.num_passes = 1
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {self.schema_version} "
                f"(expected {SCHEMA_VERSION})")
        if self.image_height <= 0 or self.image_width <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image dims "
                f"{self.image_height}x{self.image_width}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        num_tokens = (self.image_height // self.patch_size) * (self.image_width // self.patch_size)
        if (self.mask_ratio > 0.0 and not self.loss_on_all_tokens
                and int(self.mask_ratio * num_tokens) == 0):
            raise ConfigError(
                f"mask_ratio {self.mask_ratio} masks zero of {num_tokens} tokens")
        for name in ("mae_epochs", "classifier_epochs", "mae_batch_size",
                     "classifier_batch_size", "num_passes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("mae_lr", "classifier_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("mae_weight_decay", "classifier_weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= k_min <= k_max, got ({self.k_min}, {self.k_max})")
        if not 1 <= self.box_min <= self.box_max:
            raise ConfigError(
                f"need 1 <= box_min <= box_max, got ({self.box_min}, {self.box_max})")
        if self.box_max > min(self.image_height, self.image_width):
            raise ConfigError(
                f"box_max {self.box_max} exceeds image dims "
                f"{self.image_height}x{self.image_width}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(
                f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.anomaly_measure not in ANOMALY_MEASURES:
            raise ConfigError(f"anomaly_measure must be one of {ANOMALY_MEASURES}, "
                              f"got {self.anomaly_measure!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables)")
        if self.ae_mode and self.no_mae:
            raise ConfigError("ae_mode and no_mae are mutually exclusive")
        if self.no_mae and self.anomaly_measure != "classifier":
            raise ConfigError(
                "no_mae skips reconstruction, so reconstruction-error "
                f"measure {self.anomaly_measure!r} cannot be computed")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [_format_value(f.name, getattr(self, f.name))
                 for f in dataclasses.fields(self)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs = []
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            pairs.append((key.strip(), value.strip()))
        return cls.from_pairs(pairs, source=str(path))

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]], source: str = "overrides") -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        seen: set[str] = set()
        values: dict[str, Any] = {}
        for key, raw in pairs:
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}: duplicate key {key!r}")
            seen.add(key)
            values[key] = _parse_value(key, raw, fields[key].type)
        return cls(**values)

    def apply_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        """New config with ``key=value`` strings applied on top of this one."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        cfg = dataclasses.replace(self)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"unknown key {key!r}")
            setattr(cfg, key, _parse_value(key, raw.strip(), fields[key].type))
        return cfg


_BOOL_WORDS = {"true": True, "false": False}


def _parse_value(key: str, raw: str, annotation: str | type) -> Any:
    kind = annotation if isinstance(annotation, str) else annotation.__name__
    try:
        if kind == "bool":
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"expected true/false, got {raw!r}")
            return _BOOL_WORDS[word]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    raise ConfigError(f"unsupported field type {kind!r} for {key!r}")


def _format_value(key: str, value: Any) -> str:
    if isinstance(value, bool):
        return f"{key}={'true' if value else 'false'}"
    if isinstance(value, float):
        return f"{key}={value!r}"
    return f"{key}={value}"


def diff_configs(a: ExperimentConfig, b: ExperimentConfig) -> dict[str, tuple[Any, Any]]:
    """Fields whose values differ, as name -> (a value, b value)."""
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out[f.name] = (va, vb)
    return out
