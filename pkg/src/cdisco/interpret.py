"""Human-inspectable artifacts from concept vectors.

Concept activation maps weigh a layer's feature maps by the concept
coefficients; segmentation masks retain the input pixels whose
(nearest-neighbor upsampled) map value reaches the map's 80th
percentile. For dense models the concept coefficients weigh the
back-propagated input gradients into per-feature importance scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discovery import RotatedBatch
from .errors import ShapeError, ValidationError
from .tensor import DenseTensor, percentile

MASK_PERCENTILE = 0.8


@dataclass(frozen=True)
class ConceptMap:
    """Signed spatial response of one concept on one sample."""

    values: DenseTensor   # [H, W]
    sample_id: str = ""
    source: str = ""
    signed: bool = True

    def __post_init__(self):
        if self.values.rank != 2:
            raise ShapeError(f"map must be [H, W], got {self.values.shape}")


def concept_map(spatial: DenseTensor, direction, sample_id: str = "",
                source: str = "") -> ConceptMap:
    """Sum of the feature maps weighted by the concept coefficients.

    For a canonical basis direction this reduces to the corresponding
    feature map itself.
    """
    if spatial.rank != 3:
        raise ShapeError(f"spatial must be [H, W, d], got {spatial.shape}")
    u = np.asarray(direction.array if isinstance(direction, DenseTensor)
                   else direction, dtype=np.float64).reshape(-1)
    if u.size != spatial.shape[2]:
        raise ShapeError(
            f"direction length {u.size} != channel count {spatial.shape[2]}")
    values = spatial.array.astype(np.float64) @ u
    return ConceptMap(values=DenseTensor.from_array(values),
                      sample_id=sample_id, source=source)


def mask_threshold(cmap: ConceptMap, use_absolute: bool = False) -> float:
    values = cmap.values.array
    if use_absolute:
        values = np.abs(values)
    return percentile(values.reshape(-1), MASK_PERCENTILE)


def _upsample_selection(cmap: ConceptMap, height: int, width: int,
                        use_absolute: bool) -> np.ndarray:
    """Boolean [H', W'] selection of pixels at or above the 80th percentile."""
    mh, mw = cmap.values.shape
    if height % mh != 0 or width % mw != 0:
        raise ShapeError(
            f"image dims ({height}, {width}) are not integer multiples of the "
            f"map dims ({mh}, {mw})")
    values = cmap.values.array
    if use_absolute:
        values = np.abs(values)
    threshold = mask_threshold(cmap, use_absolute)
    up = np.repeat(np.repeat(values, height // mh, axis=0), width // mw, axis=1)
    return up >= threshold


def segmentation_mask(cmap: ConceptMap, image: DenseTensor,
                      use_absolute: bool = False) -> DenseTensor:
    """Zero out the image pixels below the concept map's 80th percentile.

    The map is upsampled to the image resolution by nearest neighbor;
    pixels whose upsampled value is >= the nearest-rank 80th percentile
    of the map keep their original values.
    """
    if image.rank != 3:
        raise ShapeError(f"image must be [H, W, C], got {image.shape}")
    keep = _upsample_selection(cmap, image.shape[0], image.shape[1], use_absolute)
    out = image.array.copy()
    out[~keep] = 0.0
    return DenseTensor.from_array(out)


def max_activating(source, direction=None, count: int | None = None) -> list[int]:
    """Sample indices ordered by absolute projection on a direction.

    ``source`` is either a RotatedBatch (projections of the pooled
    activations on ``direction``) or a precomputed projection sequence.
    Ties break toward the lower sample index.
    """
    if isinstance(source, RotatedBatch):
        if direction is None:
            raise ValidationError("a direction is required with a batch")
        u = np.asarray(direction.array if isinstance(direction, DenseTensor)
                       else direction, dtype=np.float64).reshape(-1)
        proj = source.pooled.array.astype(np.float64) @ u
    else:
        proj = np.asarray(source, dtype=np.float64).reshape(-1)
    n = proj.size
    if count is None:
        count = n
    if not 1 <= count <= n:
        raise ValidationError(f"count must be in [1, {n}], got {count}")
    order = np.argsort(-np.abs(proj), kind="stable")
    return [int(i) for i in order[:count]]


def tabular_importance(direction, input_jacobian: DenseTensor) -> DenseTensor:
    """Per-input-feature scores: concept coefficients applied to the Jacobian.

    ``input_jacobian`` is [d, m] (latent dim by input dim); the result
    is the concept-weighted sum of the per-unit input gradients.
    """
    u = np.asarray(direction.array if isinstance(direction, DenseTensor)
                   else direction, dtype=np.float64).reshape(-1)
    if input_jacobian.rank != 2:
        raise ShapeError(f"jacobian must be [d, m], got {input_jacobian.shape}")
    if input_jacobian.shape[0] != u.size:
        raise ShapeError(
            f"jacobian rows {input_jacobian.shape[0]} != direction length "
            f"{u.size}")
    scores = u @ input_jacobian.array.astype(np.float64)
    return DenseTensor.from_array(scores)
