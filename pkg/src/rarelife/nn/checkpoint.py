"""Parameter checkpoints as versioned ``.npz`` archives.

Each archive holds the named tensors (shape and dtype travel with the
arrays) plus a JSON header with the format version and arbitrary metadata.
Reloading is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from rarelife.errors import DataError

FORMAT_VERSION = 1
_HEADER = "__header__"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "shapes": {k: list(v.shape) for k, v in params.items()}}
    arrays = {k: np.ascontiguousarray(v) for k, v in params.items()}
    arrays[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, meta)``; raises :class:`DataError` on a bad archive."""
    with np.load(path, allow_pickle=False) as z:
        if _HEADER not in z.files:
            raise DataError(f"{path}: missing checkpoint header")
        header = json.loads(z[_HEADER].tobytes().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        params = {k: z[k].copy() for k in z.files if k != _HEADER}
    for k, shape in header["shapes"].items():
        if k not in params or list(params[k].shape) != shape:
            raise DataError(f"{path}: tensor {k!r} missing or has wrong shape")
    return params, header["meta"]
