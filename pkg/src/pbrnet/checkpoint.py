"""Checkpoint directory format shared by training and inference.

A checkpoint is a directory holding `manifest.json` — an ordered list of
{"name", "shape", "dtype": "f32"} entries — and `weights.bin`, the
concatenation of every tensor's little-endian float32 payload in manifest
order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Parameter

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "assign_parameters"]

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint."""


def save_checkpoint(directory: str | Path, params: Sequence[Parameter]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    payload = bytearray()
    for p in params:
        if not p.name:
            raise CheckpointError("cannot checkpoint an unnamed parameter")
        manifest.append({"name": p.name, "shape": list(p.data.shape), "dtype": "f32"})
        payload += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n")
    (directory / WEIGHTS_NAME).write_bytes(bytes(payload))


def load_checkpoint(directory: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> float32 array mapping."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    weights_path = directory / WEIGHTS_NAME
    if not manifest_path.is_file() or not weights_path.is_file():
        raise CheckpointError(f"{directory} is not a checkpoint directory (missing manifest or weights)")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest in {directory}: {exc}") from exc
    blob = weights_path.read_bytes()
    out: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if dtype != "f32":
            raise CheckpointError(f"unsupported dtype {dtype!r} for {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"weights.bin truncated at {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"weights.bin has {len(blob) - offset} trailing bytes")
    return out


def assign_parameters(params: Sequence[Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into parameters, insisting on an exact match."""
    names = [p.name for p in params]
    missing = [n for n in names if n not in loaded]
    extra = [n for n in loaded if n not in set(names)]
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} extra={extra[:5]}")
    for p in params:
        arr = loaded[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.momentum = np.zeros_like(p.data)
