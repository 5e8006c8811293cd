"""Dataset plumbing: slice manifests, scan-level splits, image loading with
per-slice normalization, and a procedural synthetic dataset for desk-scale
end-to-end runs.

Manifest files are line-delimited text: a header carrying the dataset name
and slice dims, then one ``sample_id <TAB> path <TAB> label <TAB> split``
record per line.  Paths are relative to the manifest location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .seeding import derive_seed

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"
LABELS = (LABEL_NORMAL, LABEL_ABNORMAL)
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content."""


class ContaminationError(ManifestError):
    """Non-normal samples found where only normal data is allowed."""


@dataclass(frozen=True)
class SliceRecord:
    sample_id: str
    path: str
    label: str
    split: str


class LabeledSlice(NamedTuple):
    """A loaded slice: pixels in [0, 1] plus its label."""

    sample_id: str
    image: np.ndarray
    label: str


class SliceEntry(NamedTuple):
    """One slice of a scan, before split assignment."""

    sample_id: str
    path: str
    abnormal: bool


@dataclass(frozen=True)
class ScanRecord:
    """All slices belonging to one scan; splits never divide a scan."""

    scan_id: str
    slices: tuple[SliceEntry, ...]


@dataclass
class SliceManifest:
    dataset: str
    height: int
    width: int
    records: list[SliceRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if rec.label not in LABELS:
                raise ManifestError(f"unknown label {rec.label!r} for {rec.sample_id}")
            if rec.split not in SPLITS:
                raise ManifestError(f"unknown split {rec.split!r} for {rec.sample_id}")
            if rec.split == "train" and rec.label != LABEL_NORMAL:
                raise ContaminationError(
                    f"abnormal sample {rec.sample_id!r} assigned to the train split")

    def split(self, name: str) -> list[SliceRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [rec for rec in self.records if rec.split == name]

    def record(self, sample_id: str) -> SliceRecord:
        for rec in self.records:
            if rec.sample_id == sample_id:
                return rec
        raise ManifestError(f"sample_id {sample_id!r} not in manifest")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"dataset={self.dataset}\theight={self.height}\twidth={self.width}"]
        lines += [f"{r.sample_id}\t{r.path}\t{r.label}\t{r.split}" for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "SliceManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ManifestError(f"empty manifest: {path}")
        header = dict(item.split("=", 1) for item in lines[0].split("\t"))
        missing = {"dataset", "height", "width"} - header.keys()
        if missing:
            raise ManifestError(f"manifest header missing fields: {sorted(missing)}")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            records.append(SliceRecord(*parts))
        manifest = cls(dataset=header["dataset"], height=int(header["height"]),
                       width=int(header["width"]), records=records, root=path.parent)
        if check_files:
            for rec in records:
                if not (manifest.root / rec.path).exists():
                    raise ManifestError(
                        f"manifest references missing file {rec.path!r} "
                        f"(sample {rec.sample_id})")
        return manifest


def build_splits(scans: Sequence[ScanRecord], *, dataset: str, height: int,
                 width: int, test_frac: float = 0.4, val_frac: float = 0.2,
                 seed: int = 0) -> SliceManifest:
    """Partition scans into train/val/test and emit a slice-level manifest.

    Splitting is scan-grouped so no scan contributes slices to two splits.
    ``test_frac`` of the scans (round half up) go to test; ``val_frac`` of
    the remaining training scans (rounded up) go to validation.  Abnormal
    slices of training scans are dropped; train keeps normal slices only.
    """
    if not scans:
        raise ValueError("empty scan list")
    ids = [s.scan_id for s in scans]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate scan ids in scan list")
    order = np.random.default_rng(seed).permutation(len(scans))
    n_test = int(len(scans) * test_frac + 0.5)
    n_val = math.ceil((len(scans) - n_test) * val_frac)
    assignment: dict[int, str] = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            assignment[idx] = "test"
        elif rank < n_test + n_val:
            assignment[idx] = "val"
        else:
            assignment[idx] = "train"

    records = []
    for idx, scan in enumerate(scans):
        split = assignment[idx]
        for entry in scan.slices:
            label = LABEL_ABNORMAL if entry.abnormal else LABEL_NORMAL
            if split == "train" and label != LABEL_NORMAL:
                continue
            records.append(SliceRecord(entry.sample_id, entry.path, label, split))
    return SliceManifest(dataset=dataset, height=height, width=width, records=records)


def read_scan_list(path: str | Path) -> list[ScanRecord]:
    """Parse a scan listing: ``scan_id <TAB> sample_id <TAB> path <TAB> label``."""
    path = Path(path)
    grouped: dict[str, list[SliceEntry]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        scan_id, sample_id, rel_path, label = parts
        if label not in LABELS:
            raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
        grouped.setdefault(scan_id, []).append(
            SliceEntry(sample_id, rel_path, label == LABEL_ABNORMAL))
    return [ScanRecord(scan_id, tuple(entries)) for scan_id, entries in grouped.items()]


# ---------------------------------------------------------------------------
# Image I/O


def write_slice(path: str | Path, image: np.ndarray) -> None:
    """Store a [0, 1] float image as a losslessly encoded 16-bit PNG.

    Out-of-range values are rejected rather than clipped so normalization
    bugs upstream cannot silently corrupt a dataset.
    """
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(
            f"image values outside [0, 1]: range [{image.min()}, {image.max()}]")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(image * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def normalize_slice(raw: np.ndarray) -> np.ndarray:
    """Per-slice min-max normalization to [0, 1]; constant slices map to zero."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def load_slice(manifest: SliceManifest, sample_id: str) -> np.ndarray:
    """Load one slice as a [0, 1] float image, validated against the
    manifest dims."""
    rec = manifest.record(sample_id)
    path = manifest.root / rec.path
    if not path.exists():
        raise ManifestError(f"missing image file for {sample_id!r}: {path}")
    try:
        with Image.open(path) as img:
            raw = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise ManifestError(f"cannot read image for {sample_id!r}: {exc}") from exc
    if raw.ndim != 2:
        raise ManifestError(
            f"{sample_id!r} is not single-channel (shape {raw.shape})")
    if raw.shape != (manifest.height, manifest.width):
        raise ManifestError(
            f"{sample_id!r} has dims {raw.shape}, manifest says "
            f"({manifest.height}, {manifest.width})")
    if not np.issubdtype(raw.dtype, np.integer):
        raise ManifestError(
            f"{sample_id!r} has unsupported pixel dtype {raw.dtype}")
    # decode to the stored [0, 1] values; normalization happens at dataset
    # build time (normalize_slice), not on every load
    return raw.astype(np.float64) / np.iinfo(raw.dtype).max


def load_split(manifest: SliceManifest, split: str) -> list[LabeledSlice]:
    return [LabeledSlice(rec.sample_id, load_slice(manifest, rec.sample_id), rec.label)
            for rec in manifest.split(split)]


def ensure_normal_only(slices: Iterable[LabeledSlice], stage: str) -> None:
    """Refuse training data that contains anything but normal samples."""
    bad = [s.sample_id for s in slices if s.label != LABEL_NORMAL]
    if bad:
        raise ContaminationError(
            f"{stage} training set contains non-normal samples: {bad[:5]}"
            f"{'...' if len(bad) > 5 else ''}")


# ---------------------------------------------------------------------------
# Synthetic desk-scale dataset


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the procedural textures and injected blob anomalies."""

    height: int = 64
    width: int = 64
    wave_count: int = 3
    wave_freq: tuple[float, float] = (0.2, 1.2)
    blob_count: tuple[int, int] = (1, 3)
    blob_radius: tuple[int, int] = (5, 10)
    blob_delta: tuple[float, float] = (0.4, 0.7)


@dataclass(frozen=True)
class SynthCounts:
    train: int = 64
    val_normal: int = 16
    val_abnormal: int = 16
    test_normal: int = 32
    test_abnormal: int = 32


def synth_texture(spec: SynthSpec, seed: int) -> np.ndarray:
    """A smooth mixture of low-frequency 2D waves, min-max scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, spec.height),
                         np.linspace(0.0, 1.0, spec.width), indexing="ij")
    img = np.zeros((spec.height, spec.width))
    for _ in range(spec.wave_count):
        fy, fx = rng.uniform(*spec.wave_freq, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        img += amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    return normalize_slice(img)


def inject_blobs(image: np.ndarray, spec: SynthSpec, seed: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Add compact bright/dark bumps; returns (image, boolean footprint mask).

    Pixels outside the footprint are untouched, so anomalies stay strictly
    localized.
    """
    rng = np.random.default_rng(seed)
    h, w = image.shape
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    for _ in range(count):
        radius = int(rng.integers(spec.blob_radius[0], spec.blob_radius[1] + 1))
        cy = int(rng.integers(radius, h - radius))
        cx = int(rng.integers(radius, w - radius))
        delta = rng.uniform(*spec.blob_delta) * rng.choice([-1.0, 1.0])
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
        inside = d2 < 1.0
        out[inside] += delta * (1.0 - d2[inside]) ** 2
        mask |= inside
    return np.clip(out, 0.0, 1.0), mask


def generate_synth_dataset(out_dir: str | Path, *, counts: SynthCounts = SynthCounts(),
                           spec: SynthSpec = SynthSpec(), seed: int = 0) -> SliceManifest:
    """Write a complete synthetic dataset (images + manifest) to ``out_dir``.

    Normal images are pure textures; abnormal val/test images are a texture
    with injected blobs.  Regeneration with the same seed is bit-identical.
    """
    out_dir = Path(out_dir)
    quotas: list[tuple[str, str, int]] = [
        ("train", LABEL_NORMAL, counts.train),
        ("val", LABEL_NORMAL, counts.val_normal),
        ("val", LABEL_ABNORMAL, counts.val_abnormal),
        ("test", LABEL_NORMAL, counts.test_normal),
        ("test", LABEL_ABNORMAL, counts.test_abnormal),
    ]
    for split, label, quota in quotas:
        if quota < 1:
            raise ValueError(f"count for {split}/{label} must be >= 1, got {quota}")
    records = []
    for split, label, quota in quotas:
        for i in range(quota):
            texture = synth_texture(spec, derive_seed(seed, "texture", split, label, i))
            if label == LABEL_ABNORMAL:
                image, _ = inject_blobs(
                    texture, spec, derive_seed(seed, "blobs", split, i))
            else:
                image = texture
            sample_id = f"{split}_{label}_{i:04d}"
            rel_path = f"images/{sample_id}.png"
            write_slice(out_dir / rel_path, image)
            records.append(SliceRecord(sample_id, rel_path, label, split))
    manifest = SliceManifest(dataset="synth", height=spec.height, width=spec.width,
                             records=records, root=out_dir)
    manifest.save(out_dir / "manifest.txt")
    return manifest
