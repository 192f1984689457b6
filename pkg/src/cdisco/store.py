"""On-disk activation dumps: the contract between a model and the engine.

A dump directory holds one CDAD file per tensor plus ``manifest.json``
describing layout and conventions. ``gradients[i, j, :]`` is the latent
gradient of sample ``i`` toward output class ``tracked_classes[j]``; for
convolutional producers it instead stores the spatially pooled product
of feature maps and gradients (``gradient_content = "pooled_product"``),
which is the quantity the class scoring consumes directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import DenseTensor, read_tensor, write_tensor

MANIFEST_VERSION = 1
GAP_CONSISTENCY_TOL = 1e-5

GRADIENT_CONVENTIONS = ("logit", "probability")
GRADIENT_CONTENTS = ("latent_gradient", "pooled_product")


@dataclass(frozen=True)
class ActivationDump:
    """Per-sample pooled activations, per-(sample, class) gradients, labels."""

    layer_name: str
    pooled: DenseTensor          # [N, d]
    gradients: DenseTensor       # [N, K_g, d]
    tracked_classes: tuple[int, ...]
    labels: tuple[int, ...]
    sample_ids: tuple[str, ...]
    class_count: int
    spatial: DenseTensor | None = None   # [N, H, W, d]
    gradient_convention: str = "logit"
    gradient_content: str = "latent_gradient"

    def __post_init__(self):
        object.__setattr__(self, "tracked_classes",
                           tuple(int(c) for c in self.tracked_classes))
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        self.validate()

    def validate(self) -> None:
        if self.pooled.rank != 2:
            raise ValidationError(f"pooled must be [N, d], got {self.pooled.shape}")
        n, d = self.pooled.shape
        if self.gradients.rank != 3:
            raise ValidationError(
                f"gradients must be [N, K_g, d], got {self.gradients.shape}")
        if self.gradients.shape[0] != n or self.gradients.shape[2] != d:
            raise ValidationError(
                f"gradients shape {self.gradients.shape} inconsistent with pooled "
                f"[{n}, {d}]")
        if self.gradients.shape[1] != len(self.tracked_classes):
            raise ValidationError("gradients class axis != tracked_classes length")
        if len(self.labels) != n:
            raise ValidationError(f"labels length {len(self.labels)} != N={n}")
        if len(self.sample_ids) != n:
            raise ValidationError(f"sample_ids length {len(self.sample_ids)} != N={n}")
        if len(set(self.sample_ids)) != n:
            raise ValidationError("sample_ids must be unique")
        if not self.tracked_classes:
            raise ValidationError("at least one tracked class is required")
        for v in self.labels:
            if not 0 <= v < self.class_count:
                raise ValidationError(f"label {v} outside [0, {self.class_count})")
        for c in self.tracked_classes:
            if not 0 <= c < self.class_count:
                raise ValidationError(
                    f"tracked class {c} outside [0, {self.class_count})")
        if self.gradient_convention not in GRADIENT_CONVENTIONS:
            raise ValidationError(
                f"unknown gradient convention {self.gradient_convention!r}")
        if self.gradient_content not in GRADIENT_CONTENTS:
            raise ValidationError(f"unknown gradient content {self.gradient_content!r}")
        if self.spatial is not None:
            if self.spatial.rank != 4:
                raise ValidationError(
                    f"spatial must be [N, H, W, d], got {self.spatial.shape}")
            if self.spatial.shape[0] != n or self.spatial.shape[3] != d:
                raise ValidationError(
                    f"spatial shape {self.spatial.shape} inconsistent with pooled")
            gap = self.spatial.array.mean(axis=(1, 2))
            err = float(np.max(np.abs(gap - self.pooled.array)))
            if err > GAP_CONSISTENCY_TOL:
                raise ValidationError(
                    f"pooled rows disagree with GAP of spatial by {err:.2e} "
                    f"(tolerance {GAP_CONSISTENCY_TOL})")

    @property
    def n(self) -> int:
        return self.pooled.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.pooled.shape[1]


def save_dump(dump: ActivationDump, dir_path) -> None:
    """Write manifest + tensors; the directory reloads bit-exactly."""
    dump.validate()
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    files = {
        "pooled": "pooled.cdad",
        "gradients": "gradients.cdad",
        "labels": "labels.json",
        "sample_ids": "sample_ids.json",
    }
    write_tensor(dump.pooled, root / files["pooled"])
    write_tensor(dump.gradients, root / files["gradients"])
    if dump.spatial is not None:
        files["spatial"] = "spatial.cdad"
        write_tensor(dump.spatial, root / files["spatial"])
    (root / files["labels"]).write_text(json.dumps(list(dump.labels)))
    (root / files["sample_ids"]).write_text(json.dumps(list(dump.sample_ids)))
    manifest = {
        "version": MANIFEST_VERSION,
        "layer_name": dump.layer_name,
        "n": dump.n,
        "d": dump.latent_dim,
        "k": dump.class_count,
        "tracked_classes": list(dump.tracked_classes),
        "gradient_convention": dump.gradient_convention,
        "gradient_content": dump.gradient_content,
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dump(dir_path) -> ActivationDump:
    """Load and re-validate a dump directory written by :func:`save_dump`."""
    root = Path(dir_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"{root}: manifest.json not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{root}: manifest is not valid JSON: {exc}") from exc
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise ValidationError(f"{root}: unknown manifest version {version!r}")
    for key in ("layer_name", "n", "d", "k", "tracked_classes", "files"):
        if key not in manifest:
            raise ValidationError(f"{root}: manifest missing field {key!r}")
    files = manifest["files"]
    for key in ("pooled", "gradients", "labels", "sample_ids"):
        if key not in files:
            raise ValidationError(f"{root}: manifest files missing {key!r}")
        if not (root / files[key]).is_file():
            raise ValidationError(f"{root}: missing tensor file {files[key]!r}")
    pooled = read_tensor(root / files["pooled"])
    gradients = read_tensor(root / files["gradients"])
    spatial = None
    if "spatial" in files:
        if not (root / files["spatial"]).is_file():
            raise ValidationError(f"{root}: missing tensor file {files['spatial']!r}")
        spatial = read_tensor(root / files["spatial"])
    labels = json.loads((root / files["labels"]).read_text())
    sample_ids = json.loads((root / files["sample_ids"]).read_text())
    if pooled.rank != 2 or pooled.shape[0] != manifest["n"] or \
            pooled.shape[1] != manifest["d"]:
        raise ValidationError(
            f"{root}: pooled shape {pooled.shape} disagrees with manifest "
            f"n={manifest['n']} d={manifest['d']}")
    return ActivationDump(
        layer_name=manifest["layer_name"],
        pooled=pooled,
        gradients=gradients,
        tracked_classes=tuple(manifest["tracked_classes"]),
        labels=tuple(labels),
        sample_ids=tuple(sample_ids),
        class_count=int(manifest["k"]),
        spatial=spatial,
        gradient_convention=manifest.get("gradient_convention", "logit"),
        gradient_content=manifest.get("gradient_content", "latent_gradient"),
    )


def subset_by_class(dump: ActivationDump, class_ids) -> ActivationDump:
    """Restrict a dump to samples of the given classes, re-indexed densely.

    New labels follow the ascending order of ``class_ids``; tracked classes
    not in the subset are dropped (at least one must remain).
    """
    wanted = sorted({int(c) for c in class_ids})
    if not wanted:
        raise ValidationError("class_ids must be nonempty")
    present = set(dump.labels)
    missing = [c for c in wanted if c not in present]
    if missing:
        raise ValidationError(f"classes {missing} have no samples in the dump")
    remap = {old: new for new, old in enumerate(wanted)}
    keep_rows = [i for i, v in enumerate(dump.labels) if v in remap]
    keep_tracked = [j for j, c in enumerate(dump.tracked_classes) if c in remap]
    if not keep_tracked:
        raise ValidationError("no tracked classes remain in the subset")
    grads = dump.gradients.array[np.ix_(keep_rows, keep_tracked)]
    return replace(
        dump,
        pooled=DenseTensor.from_array(dump.pooled.array[keep_rows]),
        gradients=DenseTensor.from_array(grads),
        tracked_classes=tuple(remap[dump.tracked_classes[j]] for j in keep_tracked),
        labels=tuple(remap[dump.labels[i]] for i in keep_rows),
        sample_ids=tuple(dump.sample_ids[i] for i in keep_rows),
        class_count=len(wanted),
        spatial=None if dump.spatial is None else
        DenseTensor.from_array(dump.spatial.array[keep_rows]),
    )
