"""Self-describing checkpoint archives: named float arrays + a config snapshot.

Backed by numpy ``.npz`` so the files stay portable and inspectable.  Arrays
round-trip bit-identically; metadata is stored as a JSON string.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    """Raised for missing, malformed, or mismatched checkpoint files."""


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON metadata block to ``path``."""
    if _META_KEY in arrays:
        raise CheckpointError(f"array name {_META_KEY!r} is reserved")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.ascontiguousarray(arr) for name, arr in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)
    # np.savez appends .npz when missing; keep the caller's exact path.
    written = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
    if written != path:
        written.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta) from a checkpoint archive."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if _META_KEY not in data:
                raise CheckpointError(f"{path} is missing its metadata block")
            meta = json.loads(str(data[_META_KEY]))
            arrays = {name: data[name] for name in data.files if name != _META_KEY}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays, meta
