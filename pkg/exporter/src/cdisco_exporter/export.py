"""Hook-based activation and gradient extraction from PyTorch models.

For every sample a forward hook at the named layer captures the
activations; one backward pass per tracked class (from the class logit
by default) yields the layer gradients. Convolutional layers store the
spatially pooled feature/gradient products per class (the convention
the engine's class scoring consumes); dense layers store the gradients
directly. The model is frozen in eval mode for the whole export.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .writer import read_cdad, write_dump_dir


@dataclass
class ExportConfig:
    layer_name: str
    tracked_classes: tuple[int, ...]
    output_dir: str
    gradient_convention: str = "logit"   # or "probability"
    subsample_rate: int = 1              # keep one sample in every N
    include_spatial: bool = True
    sample_id_prefix: str = "s"
    labels: tuple[int, ...] | None = None
    class_count: int | None = None

    def __post_init__(self):
        self.tracked_classes = tuple(int(c) for c in self.tracked_classes)
        if not self.tracked_classes:
            raise ValueError("at least one tracked class is required")
        if self.gradient_convention not in ("logit", "probability"):
            raise ValueError(
                f"unknown gradient convention {self.gradient_convention!r}")
        if self.subsample_rate < 1:
            raise ValueError("subsample rate must be >= 1")


def _find_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        known = ", ".join(sorted(k for k in modules if k))
        raise ValueError(f"layer {name!r} not found; model has: {known}")
    return modules[name]


def _to_channels_last(act: torch.Tensor) -> torch.Tensor:
    """[C, H, W] -> [H, W, C]; 1-d activations pass through."""
    if act.ndim == 3:
        return act.permute(1, 2, 0)
    if act.ndim == 1:
        return act
    raise ValueError(f"unsupported activation rank {act.ndim} at the layer")


def export(model: torch.nn.Module, images, config: ExportConfig) -> Path:
    """Run the export; returns the dump directory path.

    ``images`` is an [N, ...] numpy array or tensor in the model's
    input layout. Labels (when provided) ride along so the engine can
    compute class statistics.
    """
    was_training = model.training
    model.eval()
    try:
        return _export_frozen(model, images, config)
    finally:
        model.train(was_training)


def _export_frozen(model: torch.nn.Module, images,
                   config: ExportConfig) -> Path:
    layer = _find_layer(model, config.layer_name)
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    keep = list(range(0, x.shape[0], config.subsample_rate))
    x = x[keep]
    labels = None if config.labels is None else \
        [int(config.labels[i]) for i in keep]
    n = x.shape[0]
    if n == 0:
        raise ValueError("no samples left after subsampling")

    captured: list[torch.Tensor] = []

    def grab(_module, _inputs, output):
        output.retain_grad()
        captured.append(output)

    handle = layer.register_forward_hook(grab)
    pooled_rows, spatial_rows, gradient_rows = [], [], []
    convolutional = None
    try:
        for i in range(n):
            captured.clear()
            output = model(x[i:i + 1])
            if output.ndim != 2:
                raise ValueError("model output must be [1, K] scores")
            k_out = output.shape[1]
            bad = [c for c in config.tracked_classes if not 0 <= c < k_out]
            if bad:
                raise ValueError(f"tracked classes {bad} outside the "
                                 f"model's {k_out} outputs")
            if not captured:
                raise ValueError("forward hook captured nothing; is the "
                                 "layer on the forward path?")
            act = captured[0]
            act0 = _to_channels_last(act[0].detach().clone())
            if convolutional is None:
                convolutional = act0.ndim == 3
            per_class = []
            for cls in config.tracked_classes:
                act.grad = None
                model.zero_grad(set_to_none=True)
                if config.gradient_convention == "probability":
                    target = torch.softmax(output[0], dim=0)[cls]
                else:
                    target = output[0, cls]
                target.backward(retain_graph=True)
                grad = _to_channels_last(act.grad[0].detach().clone())
                if convolutional:
                    per_class.append((act0 * grad).mean(dim=(0, 1)).numpy())
                else:
                    per_class.append(grad.numpy())
            gradient_rows.append(np.stack(per_class))
            if convolutional:
                pooled_rows.append(act0.mean(dim=(0, 1)).numpy())
                if config.include_spatial:
                    spatial_rows.append(act0.numpy())
            else:
                pooled_rows.append(act0.numpy())
    finally:
        handle.remove()
        model.zero_grad(set_to_none=True)

    pooled = np.stack(pooled_rows)
    gradients = np.stack(gradient_rows)
    spatial = np.stack(spatial_rows) if spatial_rows else None
    if labels is None:
        labels = [0] * n
    class_count = config.class_count or max(
        max(labels) + 1, max(config.tracked_classes) + 1)
    sample_ids = [f"{config.sample_id_prefix}{keep[i]:04d}" for i in range(n)]
    write_dump_dir(
        config.output_dir,
        layer_name=config.layer_name,
        pooled=pooled,
        gradients=gradients,
        tracked_classes=config.tracked_classes,
        labels=labels,
        sample_ids=sample_ids,
        class_count=class_count,
        spatial=spatial,
        gradient_convention=config.gradient_convention,
        gradient_content="pooled_product" if convolutional else
        "latent_gradient",
    )
    return Path(config.output_dir)


def load_dataset_dir(path) -> tuple[np.ndarray, list[int], int]:
    """Read a dataset directory written by the engine's CLI."""
    root = Path(path)
    manifest = json.loads((root / "dataset.json").read_text())
    features = read_cdad(root / manifest["files"]["features"])
    labels = json.loads((root / manifest["files"]["labels"]).read_text())
    return features, [int(v) for v in labels], int(manifest["class_count"])
