"""Writers for the activation-dump on-disk contract.

Implements the CDAD tensor container (magic ``CDAD``, version u32=1,
rank u32, shape u64 per axis, float32 little-endian row-major payload)
and the dump directory layout (one CDAD file per tensor, labels and
sample ids as JSON, ``manifest.json`` describing layout and
conventions). This module deliberately re-implements the format from
its specification: the engine is consumed through its file contract,
not through its Python API.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CDAD_MAGIC = b"CDAD"
CDAD_VERSION = 1
MANIFEST_VERSION = 1


def write_cdad(array: np.ndarray, path) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(CDAD_MAGIC)
        fh.write(struct.pack("<I", CDAD_VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_cdad(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != CDAD_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != CDAD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{rank}Q" if rank else "<", blob, 12)
    count = int(np.prod(shape)) if shape else 1
    payload = blob[12 + 8 * rank:]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)


def write_dump_dir(out_dir, *, layer_name: str, pooled: np.ndarray,
                   gradients: np.ndarray, tracked_classes, labels,
                   sample_ids, class_count: int,
                   spatial: np.ndarray | None = None,
                   gradient_convention: str = "logit",
                   gradient_content: str = "latent_gradient") -> Path:
    """Write a complete dump directory; returns the manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {
        "pooled": "pooled.cdad",
        "gradients": "gradients.cdad",
        "labels": "labels.json",
        "sample_ids": "sample_ids.json",
    }
    write_cdad(pooled, root / files["pooled"])
    write_cdad(gradients, root / files["gradients"])
    if spatial is not None:
        files["spatial"] = "spatial.cdad"
        write_cdad(spatial, root / files["spatial"])
    (root / files["labels"]).write_text(json.dumps([int(v) for v in labels]))
    (root / files["sample_ids"]).write_text(
        json.dumps([str(s) for s in sample_ids]))
    manifest = {
        "version": MANIFEST_VERSION,
        "layer_name": layer_name,
        "n": int(pooled.shape[0]),
        "d": int(pooled.shape[1]),
        "k": int(class_count),
        "tracked_classes": [int(c) for c in tracked_classes],
        "gradient_convention": gradient_convention,
        "gradient_content": gradient_content,
        "files": files,
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
