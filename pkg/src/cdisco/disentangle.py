"""Refinement of ranked directions into unique concept vectors.

Top-activating representations of a direction are clustered
hierarchically (Ward linkage, dendrogram cut at a fraction of the
maximum merge height) to choose a cluster count, refined by seeded
k-means, pruned of undersized clusters, and summarized as unit-norm
centroid directions. The same machinery, applied per direction, yields
polysemanticity statistics for singular vectors versus individual
neurons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .discovery import ConceptVector, RotatedBatch
from .errors import NumericalError, ValidationError
from .tensor import DenseTensor

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class RefineConfig:
    """Knobs for the clustering refinement.

    ``top_count=None`` selects max(30, 2% of N). ``threshold_frac``
    cuts the dendrogram at that fraction of the maximum merge height.
    When ``cut_height`` is set it is used as an absolute Ward-height
    cut instead; deriving it once per batch (see
    :func:`reference_cut_height`) keeps the granularity comparable
    across directions, which per-dendrogram fractions cannot do.
    """

    top_count: int | None = None
    threshold_frac: float = 0.6
    min_cluster_size: int = 5
    seed: int = 0
    cut_height: float | None = None

    def resolve_top_count(self, n: int) -> int:
        if self.top_count is not None:
            count = self.top_count
        else:
            count = max(30, math.ceil(0.02 * n))
        return min(count, n)


@dataclass(frozen=True)
class ClusterOutcome:
    n_clusters: int
    assignments: tuple[int, ...]        # cluster index per retained sample
    centroids: DenseTensor              # [n_clusters, d]
    dropped: tuple[str, ...] = field(default=())


def select_top_activating(batch: RotatedBatch, direction_index: int,
                          count: int) -> list[int]:
    """Indices of the samples with the largest coefficients on a direction."""
    if not 0 <= direction_index < batch.rank:
        raise ValidationError(
            f"direction index {direction_index} outside [0, {batch.rank})")
    if not 1 <= count <= batch.n:
        raise ValidationError(f"count must be in [1, {batch.n}], got {count}")
    coeffs = batch.coeffs.array[:, direction_index]
    order = np.argsort(-coeffs, kind="stable")
    return [int(i) for i in order[:count]]


def hierarchical_cluster(points, threshold_frac: float,
                         cut_height: float | None = None) -> ClusterOutcome:
    """Ward-linkage agglomerative clustering cut at a height fraction.

    The dendrogram is cut at ``threshold_frac`` times its own maximum
    merge height, or at the absolute ``cut_height`` when given.
    Deterministic for a fixed input order; cluster labels are assigned
    in order of first appearance.
    """
    pts = np.asarray(points.array if isinstance(points, DenseTensor) else points,
                     dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValidationError("need at least 2 points to cluster")
    if not 0.0 < threshold_frac <= 1.0:
        raise ValidationError(f"threshold_frac must be in (0, 1], got "
                              f"{threshold_frac}")
    merges = linkage(pts, method="ward")
    if cut_height is None:
        cut_height = threshold_frac * float(merges[:, 2].max())
    labels = fcluster(merges, t=cut_height, criterion="distance")
    relabel: dict[int, int] = {}
    assignments = []
    for lab in labels:
        if lab not in relabel:
            relabel[lab] = len(relabel)
        assignments.append(relabel[lab])
    n_clusters = len(relabel)
    centroids = np.stack([
        pts[np.asarray(assignments) == c].mean(axis=0) for c in range(n_clusters)])
    return ClusterOutcome(
        n_clusters=n_clusters,
        assignments=tuple(assignments),
        centroids=DenseTensor.from_array(centroids),
    )


def _kmeans_pp_init(pts: np.ndarray, k: int, rng: np.random.Generator
                    ) -> np.ndarray:
    n = pts.shape[0]
    centers = np.empty((k, pts.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = pts[first]
    dist2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(dist2.sum())
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            centers[c] = pts[int(rng.integers(0, n))]
            continue
        target = float(rng.random()) * total
        idx = int(np.searchsorted(np.cumsum(dist2), target))
        idx = min(idx, n - 1)
        centers[c] = pts[idx]
        dist2 = np.minimum(dist2, np.sum((pts - centers[c]) ** 2, axis=1))
    return centers


def kmeans(points, k: int, seed: int = 0
           ) -> tuple[tuple[int, ...], DenseTensor]:
    """Lloyd iterations from seeded k-means++ starting centers.

    Stops when the largest centroid movement drops below 1e-6 or after
    100 iterations. Empty clusters are reseeded to the point farthest
    from its assigned centroid.
    """
    pts = np.asarray(points.array if isinstance(points, DenseTensor) else points,
                     dtype=np.float64)
    if pts.ndim != 2:
        raise ValidationError("points must be a [n, d] array")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(pts, k, rng)
    prev_inertia = float("inf")
    assignments = np.zeros(n, dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        dist2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignments = np.argmin(dist2, axis=1)
        inertia = float(dist2[np.arange(n), assignments].sum())
        if inertia > prev_inertia * (1.0 + 1e-9) + 1e-12:
            raise NumericalError("k-means inertia increased between iterations")
        prev_inertia = inertia
        moved = 0.0
        farthest = np.argsort(-dist2[np.arange(n), assignments], kind="stable")
        steal = 0
        for c in range(k):
            members = pts[assignments == c]
            if len(members) == 0:
                # farthest-point reseed keeps every cluster populated
                while steal < n and np.any(
                        np.all(centers == pts[farthest[steal]], axis=1)):
                    steal += 1
                take = farthest[min(steal, n - 1)]
                steal += 1
                new_center = pts[take]
            else:
                new_center = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new_center - centers[c])))
            centers[c] = new_center
        if moved < KMEANS_TOL:
            break
    dist2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignments = np.argmin(dist2, axis=1)
    return (tuple(int(a) for a in assignments),
            DenseTensor.from_array(centers))


def reference_cut_height(batch: RotatedBatch,
                         config: RefineConfig = RefineConfig()) -> float:
    """Batch-level Ward cut height for cross-direction comparisons.

    Builds a reference dendrogram over an evenly strided sample of
    ``top_count`` pooled rows (spanning all classes) and returns
    ``threshold_frac`` times its maximum merge height.
    """
    count = config.resolve_top_count(batch.n)
    if count < 2:
        raise ValidationError("need at least 2 samples for a reference cut")
    idx = np.linspace(0, batch.n - 1, count).astype(int)
    merges = linkage(batch.pooled.array[idx].astype(np.float64), method="ward")
    return config.threshold_frac * float(merges[:, 2].max())


def _cluster_direction(batch: RotatedBatch, direction: np.ndarray,
                       config: RefineConfig) -> list[tuple[int, list[int]]]:
    """Shared selection + clustering stage; returns (cluster id, member rows).

    Members are row indices into the batch; only clusters meeting the
    minimum size survive. The list is ordered by size descending, ties
    by cluster id.
    """
    count = config.resolve_top_count(batch.n)
    proj = batch.pooled.array.astype(np.float64) @ direction
    order = np.argsort(-proj, kind="stable")[:count]
    pts = batch.pooled.array[order].astype(np.float64)
    if pts.shape[0] < 2:
        raise ValidationError("need at least 2 top-activating samples")
    outcome = hierarchical_cluster(pts, config.threshold_frac,
                                   cut_height=config.cut_height)
    assignments, _ = kmeans(pts, outcome.n_clusters, seed=config.seed)
    groups: dict[int, list[int]] = {}
    for row, cluster in zip(order, assignments):
        groups.setdefault(cluster, []).append(int(row))
    kept = [(cid, rows) for cid, rows in groups.items()
            if len(rows) >= config.min_cluster_size]
    kept.sort(key=lambda item: (-len(item[1]), item[0]))
    return kept


def refine_direction(batch: RotatedBatch, direction,
                     config: RefineConfig = RefineConfig(),
                     source_index: int | None = None,
                     class_id: int | None = None) -> list[ConceptVector]:
    """Split a direction into unit-norm cluster-centroid concept vectors.

    Centroids are means of the members' full pooled activations, so the
    refined vectors are generally not orthogonal to each other or to
    the remaining singular directions.
    """
    dir_arr = np.asarray(
        direction.array if isinstance(direction, DenseTensor) else direction,
        dtype=np.float64).reshape(-1)
    if dir_arr.size != batch.pooled.shape[1]:
        raise ValidationError(
            f"direction length {dir_arr.size} != latent dim "
            f"{batch.pooled.shape[1]}")
    kept = _cluster_direction(batch, dir_arr, config)
    vectors = []
    tag = str(source_index) if source_index is not None else "x"
    for out_rank, (cid, rows) in enumerate(kept):
        centroid = batch.pooled.array[rows].astype(np.float64).mean(axis=0)
        norm = float(np.linalg.norm(centroid))
        if norm < 1e-12:
            continue
        vectors.append(ConceptVector(
            direction=DenseTensor.from_array(centroid / norm),
            source=f"cluster:{tag}/{cid}",
            rank=out_rank,
            class_id=class_id,
            member_samples=tuple(batch.sample_ids[i] for i in rows),
        ))
    if not vectors:
        raise ValidationError("no significant clusters")
    return vectors


def polysemanticity_census(batch: RotatedBatch, directions,
                           config: RefineConfig = RefineConfig()
                           ) -> dict[int, int]:
    """Histogram of significant-cluster counts per analyzed direction.

    ``directions`` is an iterable of [d] vectors; canonical basis
    vectors probe individual neurons, singular vectors probe the
    decomposition.
    """
    dirs = list(directions)
    if not dirs:
        raise ValidationError("need at least one direction")
    histogram: dict[int, int] = {}
    for vec in dirs:
        arr = np.asarray(vec.array if isinstance(vec, DenseTensor) else vec,
                         dtype=np.float64).reshape(-1)
        kept = _cluster_direction(batch, arr, config)
        count = len(kept)
        histogram[count] = histogram.get(count, 0) + 1
    return dict(sorted(histogram.items()))
