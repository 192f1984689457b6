"""Variance alignment and sensitivity-based ranking of latent directions.

The pooled activations of a dump are column-stacked into a [d, N]
matrix, decomposed by SVD, and both activations and per-class gradients
are rotated into the singular basis. Each direction's influence on an
output class is the element-wise product of rotated activation and
gradient coefficients; per-class importance is the standardized
contrast between the in-class mean of that product and its
out-of-class distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, ValidationError
from .linalg import SvdResult, svd
from .store import ActivationDump
from .tensor import DenseTensor

SIGMA_FLOOR = 1e-8
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ConceptVector:
    """A unit-norm latent direction with provenance.

    ``source`` records how the vector was obtained: ``"singular:<j>"``
    for a raw singular direction, ``"cluster:<j>/<c>"`` for the c-th
    cluster centroid refined from singular direction j, or
    ``"neuron:<j>"`` for a canonical basis direction.
    """

    direction: DenseTensor        # [d]
    source: str
    rank: int
    class_id: int | None = None
    member_samples: tuple[str, ...] = ()

    def __post_init__(self):
        if self.direction.rank != 1:
            raise ShapeError(f"direction must be rank 1, got {self.direction.shape}")
        norm = float(np.linalg.norm(self.direction.array.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValidationError(f"direction norm {norm} is not 1 within "
                                  f"{UNIT_NORM_TOL}")
        object.__setattr__(self, "member_samples", tuple(self.member_samples))


@dataclass(frozen=True)
class ConceptBasis:
    """Singular directions of a layer plus per-class importance scores."""

    u: DenseTensor               # [d, r]
    sigma: tuple[float, ...]     # [r]
    layer_name: str
    tracked_classes: tuple[int, ...]
    z_scores: DenseTensor | None = None   # [K_g, r]
    ranking: tuple[tuple[int, ...], ...] | None = None  # per tracked class

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        object.__setattr__(self, "tracked_classes",
                           tuple(int(c) for c in self.tracked_classes))
        cols = self.u.array.astype(np.float64)
        norms = np.linalg.norm(cols, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValidationError("columns of u must be unit-norm")
        if self.ranking is not None:
            r = self.u.shape[1]
            for k, order in enumerate(self.ranking):
                if sorted(order) != list(range(r)):
                    raise ValidationError(
                        f"ranking for tracked class index {k} is not a permutation")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def class_index(self, class_id: int) -> int:
        try:
            return self.tracked_classes.index(class_id)
        except ValueError:
            raise ValidationError(
                f"class {class_id} is not tracked (tracked: "
                f"{self.tracked_classes})") from None


@dataclass(frozen=True)
class RotatedBatch:
    """Activations, gradients, and their products in the singular basis.

    Carries the pooled activations and sample bookkeeping so that the
    clustering refinement and outlier analyses can run from this object
    alone. For dumps storing pooled feature/gradient products, the
    sensitivity equals the rotated stored vectors.
    """

    coeffs: DenseTensor          # [N, r]
    grad_coeffs: DenseTensor     # [N, K_g, r]
    sensitivity: DenseTensor     # [N, K_g, r]
    pooled: DenseTensor          # [N, d]
    labels: tuple[int, ...]
    sample_ids: tuple[str, ...]
    tracked_classes: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def rank(self) -> int:
        return self.coeffs.shape[1]


def build_basis(dump: ActivationDump,
                center: bool = False) -> tuple[ConceptBasis, RotatedBatch]:
    """Step 1 + rotation: SVD of the column-stacked activations.

    Returns the basis (without scores) and the rotated batch. The
    activation matrix is [d, N]; coefficients are ``pooled @ u``.
    """
    if dump.n < 2:
        raise ValidationError("need at least 2 samples to decompose")
    phi = DenseTensor.from_array(dump.pooled.array.T)
    result: SvdResult = svd(phi, center=center)
    u64 = result.u.array.astype(np.float64)
    pooled64 = dump.pooled.array.astype(np.float64)
    grads64 = dump.gradients.array.astype(np.float64)
    coeffs = pooled64 @ u64
    grad_coeffs = np.einsum("dr,nkd->nkr", u64, grads64)
    if dump.gradient_content == "pooled_product":
        # Producer already stored GAP(features * gradients); rotating it
        # gives the per-direction sensitivity directly.
        sensitivity = grad_coeffs
    else:
        sensitivity = grad_coeffs * coeffs[:, None, :]
    basis = ConceptBasis(
        u=result.u,
        sigma=result.sigma,
        layer_name=dump.layer_name,
        tracked_classes=dump.tracked_classes,
    )
    batch = RotatedBatch(
        coeffs=DenseTensor.from_array(coeffs),
        grad_coeffs=DenseTensor.from_array(grad_coeffs),
        sensitivity=DenseTensor.from_array(sensitivity),
        pooled=dump.pooled,
        labels=dump.labels,
        sample_ids=dump.sample_ids,
        tracked_classes=dump.tracked_classes,
    )
    return basis, batch


def score_regression(batch: RotatedBatch) -> list[float]:
    """Single-output ranking: sample mean of the sensitivity per direction."""
    if len(batch.tracked_classes) != 1:
        raise ValidationError(
            "score_regression handles a single output; use score_classes for "
            f"{len(batch.tracked_classes)} tracked classes")
    mean = batch.sensitivity.array[:, 0, :].astype(np.float64).mean(axis=0)
    return [float(x) for x in mean]


def score_classes(batch: RotatedBatch, labels=None,
                  tracked_classes=None) -> DenseTensor:
    """Per-class standardized importance of each singular direction.

    For tracked class k: the mean sensitivity toward k over samples of
    class k, contrasted with the mean/std of the sensitivity toward k
    over all other samples. The out-of-class std is floored at 1e-8.
    """
    labels = tuple(int(v) for v in (labels if labels is not None else batch.labels))
    tracked = tuple(int(c) for c in (
        tracked_classes if tracked_classes is not None else batch.tracked_classes))
    if len(labels) != batch.n:
        raise ValidationError(f"labels length {len(labels)} != N={batch.n}")
    if tracked != batch.tracked_classes:
        raise ValidationError(
            f"tracked classes {tracked} do not match the batch "
            f"({batch.tracked_classes})")
    sens = batch.sensitivity.array.astype(np.float64)
    labels_arr = np.asarray(labels)
    z = np.zeros((len(tracked), batch.rank))
    for idx, cls in enumerate(tracked):
        in_mask = labels_arr == cls
        n_in = int(in_mask.sum())
        n_out = int((~in_mask).sum())
        if n_in == 0:
            raise ValidationError(f"tracked class {cls} has no samples")
        if n_out < 2:
            raise ValidationError(
                f"tracked class {cls} needs at least 2 out-of-class samples")
        toward = sens[:, idx, :]
        in_mean = toward[in_mask].mean(axis=0)
        out_rows = toward[~in_mask]
        out_mean = out_rows.mean(axis=0)
        out_std = np.sqrt(((out_rows - out_mean) ** 2).mean(axis=0))
        z[idx] = (in_mean - out_mean) / np.maximum(out_std, SIGMA_FLOOR)
    return DenseTensor.from_array(z)


def attach_scores(basis: ConceptBasis, z_scores: DenseTensor) -> ConceptBasis:
    """Return a basis with scores and per-class rankings filled in."""
    z = z_scores.array
    if z.shape != (len(basis.tracked_classes), basis.rank):
        raise ShapeError(
            f"z_scores shape {z.shape} != "
            f"({len(basis.tracked_classes)}, {basis.rank})")
    ranking = tuple(
        tuple(int(j) for j in np.argsort(-z[k], kind="stable"))
        for k in range(z.shape[0]))
    return replace(basis, z_scores=z_scores, ranking=ranking)


def discover(dump: ActivationDump, center: bool = False
             ) -> tuple[ConceptBasis, RotatedBatch]:
    """Steps 1-2 in one call: basis with z-scores and rankings."""
    basis, batch = build_basis(dump, center=center)
    z = score_classes(batch)
    return attach_scores(basis, z), batch


def rank_and_select(basis: ConceptBasis, class_id: int, m: int
                    ) -> list[ConceptVector]:
    """Top-m singular directions for a class, by descending importance.

    Ties in the score break toward the lower column index (the ranking
    is computed with a stable sort).
    """
    if basis.ranking is None:
        raise ValidationError("basis has no scores; run score_classes first")
    if not 1 <= m <= basis.rank:
        raise ValidationError(f"m must be in [1, {basis.rank}], got {m}")
    k = basis.class_index(class_id)
    order = basis.ranking[k][:m]
    u = basis.u.array
    out = []
    for rank_pos, j in enumerate(order):
        out.append(ConceptVector(
            direction=DenseTensor.from_array(u[:, j]),
            source=f"singular:{j}",
            rank=rank_pos,
            class_id=class_id,
        ))
    return out


def orient_toward_class(vector: ConceptVector, batch: RotatedBatch,
                        class_id: int) -> ConceptVector:
    """Flip a direction so in-class samples project positively on average.

    The sensitivity product is invariant under direction negation, so
    rankings cannot fix an orientation; maps and masks need one.
    """
    labels = np.asarray(batch.labels)
    mask = labels == class_id
    if not mask.any():
        raise ValidationError(f"class {class_id} has no samples")
    proj = batch.pooled.array[mask].astype(np.float64) @ \
        vector.direction.array.astype(np.float64)
    if float(proj.mean()) < 0.0:
        return replace(vector,
                       direction=DenseTensor.from_array(-vector.direction.array))
    return vector
