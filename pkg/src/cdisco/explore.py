"""Training-set exploration: coefficient outliers and 2-D projections.

Samples are scored per analyzed singular direction against Tukey
fences on the rotated coefficients; the flagged set is capped at a
budget fraction and never includes samples inside every fence.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .discovery import RotatedBatch
from .errors import ValidationError
from .linalg import iqr_bounds

IQR_EPS = 1e-12


@dataclass(frozen=True)
class FlaggedSample:
    index: int
    sample_id: str
    violations: int
    distance: float   # summed bound excess, normalized by each direction's IQR


@dataclass(frozen=True)
class OutlierReport:
    flagged: tuple[FlaggedSample, ...]
    fraction_flagged: float
    per_direction_bounds: dict[int, tuple[float, float]]
    direction_indices: tuple[int, ...]
    accuracy_on_flagged: float | None = None
    accuracy_on_rest: float | None = None

    @property
    def flagged_ids(self) -> tuple[str, ...]:
        return tuple(f.sample_id for f in self.flagged)

    @property
    def flagged_indices(self) -> tuple[int, ...]:
        return tuple(f.index for f in self.flagged)


def flag_outliers(batch: RotatedBatch, direction_indices,
                  target_frac: float = 0.10,
                  fence_multiplier: float = 1.5) -> OutlierReport:
    """Flag samples whose coefficients fall outside the Tukey fences.

    Samples are ordered by violation count, then by total normalized
    excess, then by index; at most ``ceil(target_frac * N)`` are
    flagged and zero-violation samples never are.
    """
    dirs = [int(j) for j in direction_indices]
    if not dirs:
        raise ValidationError("need at least one direction")
    for j in dirs:
        if not 0 <= j < batch.rank:
            raise ValidationError(f"direction {j} outside [0, {batch.rank})")
    n = batch.n
    if n < 4:
        raise ValidationError("need at least 4 samples for quartiles")
    if not 0.0 < target_frac <= 1.0:
        raise ValidationError(f"target_frac must be in (0, 1], got {target_frac}")
    coeffs = batch.coeffs.array.astype(np.float64)
    violations = np.zeros(n, dtype=int)
    distance = np.zeros(n)
    bounds: dict[int, tuple[float, float]] = {}
    for j in dirs:
        col = coeffs[:, j]
        lo, hi = iqr_bounds(col, multiplier=fence_multiplier)
        bounds[j] = (lo, hi)
        iqr = max((hi - lo) / (1.0 + 2.0 * fence_multiplier), IQR_EPS)
        excess = np.where(col < lo, lo - col, np.where(col > hi, col - hi, 0.0))
        violations += (excess > 0).astype(int)
        distance += excess / iqr
    budget = int(np.ceil(target_frac * n))
    order = np.lexsort((np.arange(n), -distance, -violations))
    flagged = []
    for i in order:
        if violations[i] == 0 or len(flagged) >= budget:
            break
        flagged.append(FlaggedSample(
            index=int(i),
            sample_id=batch.sample_ids[i],
            violations=int(violations[i]),
            distance=float(distance[i]),
        ))
    return OutlierReport(
        flagged=tuple(flagged),
        fraction_flagged=len(flagged) / n,
        per_direction_bounds=bounds,
        direction_indices=tuple(dirs),
    )


def flagged_accuracy(report: OutlierReport, predictions, labels) -> OutlierReport:
    """Fill in the accuracy contrast between flagged and remaining samples."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValidationError(
            f"predictions length {pred.shape} != labels {lab.shape}")
    correct = pred == lab
    flagged_idx = np.asarray(report.flagged_indices, dtype=int)
    if flagged_idx.size and flagged_idx.max() >= lab.size:
        raise ValidationError("flagged index outside the prediction array")
    mask = np.zeros(lab.size, dtype=bool)
    mask[flagged_idx] = True
    acc_flagged = float(correct[mask].mean()) if mask.any() else None
    acc_rest = float(correct[~mask].mean()) if (~mask).any() else None
    return replace(report, accuracy_on_flagged=acc_flagged,
                   accuracy_on_rest=acc_rest)


def project_2d(batch: RotatedBatch, direction_a: int,
               direction_b: int) -> np.ndarray:
    """[N, 2] coefficients along two distinct singular directions."""
    if direction_a == direction_b:
        raise ValidationError("projection directions must be distinct")
    for j in (direction_a, direction_b):
        if not 0 <= j < batch.rank:
            raise ValidationError(f"direction {j} outside [0, {batch.rank})")
    coeffs = batch.coeffs.array
    return np.stack([coeffs[:, direction_a], coeffs[:, direction_b]], axis=1)


def write_projection_csv(batch: RotatedBatch, coords: np.ndarray, path,
                         flagged_ids=()) -> None:
    """CSV of (sample_id, x, y, label, flagged) for external plotting."""
    flagged = set(flagged_ids)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "x", "y", "label", "flagged"])
        for i in range(batch.n):
            writer.writerow([
                batch.sample_ids[i],
                repr(float(coords[i, 0])),
                repr(float(coords[i, 1])),
                batch.labels[i],
                int(batch.sample_ids[i] in flagged),
            ])
