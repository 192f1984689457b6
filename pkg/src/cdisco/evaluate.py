"""Quantitative concept-relevance metrics.

Covers input-space concept removal (occlusion at the map's 80th
percentile, smallest-destroying-concepts scan), latent-space removal
(weight annihilation with random-direction controls), alignment of
discovered vectors with the canonical basis, and prediction-gap
faithfulness for tabular explanations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discovery import ConceptVector
from .errors import ShapeError, ValidationError
from .interpret import ConceptMap, _upsample_selection, concept_map
from .tensor import DenseTensor


@dataclass(frozen=True)
class AblationReport:
    """Per-class record of gradual concept removal.

    ``accuracy_after``/``degraded_fraction`` have one entry per removal
    step (concepts 1..j). ``control_accuracy`` holds, per step, the
    random-direction accuracies over the control seeds. ``sdc`` is the
    smallest step whose degraded fraction reaches the criterion, or
    None if never reached. ``per_class_accuracy_after`` tracks the
    analyzed class alone; overall and per-class views are both kept
    because the reference protocol does not say which one it used.
    """

    class_id: int
    concepts_removed: tuple[str, ...]
    accuracy_before: float
    accuracy_after: tuple[float, ...] = ()
    degraded_fraction: tuple[float, ...] = ()
    sdc: int | None = None
    control_accuracy: tuple[tuple[float, ...], ...] = ()
    control_seeds: tuple[int, ...] = ()
    per_class_accuracy_before: float | None = None
    per_class_accuracy_after: tuple[float, ...] = field(default=())
    zeroed_counts: tuple[int, ...] = ()

    def __post_init__(self):
        for acc in (self.accuracy_before, *self.accuracy_after):
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy {acc} outside [0, 1]")


def occlude_concept(image: DenseTensor, cmap: ConceptMap, fill,
                    use_absolute: bool = False) -> DenseTensor:
    """Replace the pixels selected by the 80th-percentile rule with a fill.

    ``fill`` is a scalar or a per-channel sequence (e.g. the dataset
    mean). Selection matches :func:`interpret.segmentation_mask`.
    """
    if image.rank != 3:
        raise ShapeError(f"image must be [H, W, C], got {image.shape}")
    selected = _upsample_selection(cmap, image.shape[0], image.shape[1],
                                   use_absolute)
    fill_arr = np.asarray(fill, dtype=np.float32).reshape(-1)
    if fill_arr.size not in (1, image.shape[2]):
        raise ShapeError(
            f"fill must be scalar or per-channel ({image.shape[2]}), got "
            f"{fill_arr.size} values")
    out = image.array.copy()
    out[selected] = fill_arr
    return DenseTensor.from_array(out)


def resolve_fill(images: np.ndarray, mode: str):
    """Fill values for occlusion: dataset mean, mid-range gray, or zero."""
    if mode == "mean":
        return images.mean(axis=(0, 1, 2))
    if mode == "gray":
        return 0.5 * (images.min() + images.max()) * np.ones(images.shape[3],
                                                             dtype=np.float32)
    if mode == "zero":
        return np.zeros(images.shape[3], dtype=np.float32)
    raise ValidationError(f"unknown fill mode {mode!r}")


def sdc(model, images: DenseTensor, labels, concepts: list[ConceptVector],
        class_id: int, degrade_frac: float = 0.8, fill="mean",
        use_absolute: bool = False) -> AblationReport:
    """Smallest number of occluded concepts degrading most predictions.

    Occludes the union of the top-j concept regions per sample of the
    class and records the fraction of originally correct predictions
    that move away from the class. ``model`` must expose
    ``spatial_features(x)`` and ``predict(x)``.
    """
    if not concepts:
        raise ValidationError("need at least one concept")
    if not 0.0 < degrade_frac <= 1.0:
        raise ValidationError(f"degrade_frac must be in (0, 1], got "
                              f"{degrade_frac}")
    labels = np.asarray(labels)
    if labels.max() >= model.class_count or class_id >= model.class_count:
        raise ValidationError("labels/class outside the model's classes")
    imgs = images.array
    if isinstance(fill, str):
        fill = resolve_fill(imgs, fill)
    rows = np.where(labels == class_id)[0]
    if rows.size == 0:
        raise ValidationError(f"class {class_id} has no samples")
    class_imgs = imgs[rows]
    base_pred = model.predict(class_imgs)
    eligible = base_pred == class_id
    n_eligible = int(eligible.sum())
    spatial = model.spatial_features(class_imgs)
    overall_before = float(np.mean(model.predict(imgs) == labels))
    selections = []
    for vec in concepts:
        per_sample = []
        for i in range(class_imgs.shape[0]):
            cmap = concept_map(DenseTensor.from_array(spatial[i]), vec.direction)
            per_sample.append(_upsample_selection(
                cmap, class_imgs.shape[1], class_imgs.shape[2], use_absolute))
        selections.append(np.stack(per_sample))
    degraded = []
    smallest = None
    fill_arr = np.asarray(fill, dtype=np.float32).reshape(-1)
    for j in range(1, len(concepts) + 1):
        union = np.any(np.stack(selections[:j]), axis=0)
        occluded = class_imgs.copy()
        occluded[union] = fill_arr
        new_pred = model.predict(occluded)
        if n_eligible == 0:
            frac = 0.0
        else:
            frac = float(np.mean(new_pred[eligible] != class_id))
        degraded.append(frac)
        if smallest is None and frac >= degrade_frac:
            smallest = j
    return AblationReport(
        class_id=class_id,
        concepts_removed=tuple(v.source for v in concepts),
        accuracy_before=overall_before,
        degraded_fraction=tuple(degraded),
        sdc=smallest,
    )


def annihilate_weights(layer_weights: DenseTensor, direction,
                       keep_frac: float = 0.8) -> tuple[DenseTensor, int]:
    """Zero the weight slices of the channels with top concept components.

    The top ``ceil((1 - keep_frac) * d)`` channels ranked by component
    magnitude (ties toward the lower index) are zeroed; the rest are
    untouched. Returns the modified weights and the count of zeroed
    scalars.
    """
    u = np.asarray(direction.array if isinstance(direction, DenseTensor)
                   else direction, dtype=np.float64).reshape(-1)
    if layer_weights.rank < 1 or layer_weights.shape[0] != u.size:
        raise ShapeError(
            f"weights leading axis {layer_weights.shape} != direction length "
            f"{u.size}")
    if not 0.0 < keep_frac < 1.0:
        raise ValidationError(f"keep_frac must be in (0, 1), got {keep_frac}")
    n_zero = min(u.size, math.ceil((1.0 - keep_frac) * u.size))
    order = np.argsort(-np.abs(u), kind="stable")
    channels = order[:n_zero]
    out = layer_weights.array.copy()
    zeroed = 0
    for c in channels:
        zeroed += out[c].size if out.ndim > 1 else 1
        out[c] = 0.0
    return DenseTensor.from_array(out), zeroed


def _head_accuracy(pooled: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                   bias: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.argmax(pooled @ weights + bias, axis=1)
    return float(np.mean(pred == labels)), pred


def ablation_with_control(pooled: DenseTensor, labels, head_weights: DenseTensor,
                          head_bias, concepts: list[ConceptVector],
                          class_id: int, n_random_seeds: int = 10,
                          keep_frac: float = 0.8,
                          seed: int = 0) -> AblationReport:
    """Accuracy after annihilating concept directions vs random directions.

    Concepts are removed cumulatively (directions 1..j); for each step
    the same per-direction channel sparsity is applied to random unit
    directions (one run per control seed). Predictions come from the
    dense head on the stored pooled activations, so no forward passes
    are repeated.
    """
    if not concepts:
        raise ValidationError("need at least one concept")
    labels = np.asarray(labels)
    pooled_arr = pooled.array.astype(np.float64)
    weights = head_weights.array.astype(np.float64)
    bias = np.asarray(head_bias, dtype=np.float64).reshape(-1)
    base_acc, base_pred = _head_accuracy(pooled_arr, labels, weights, bias)
    class_mask = labels == class_id
    if not class_mask.any():
        raise ValidationError(f"class {class_id} has no samples")
    base_class_acc = float(np.mean(base_pred[class_mask] == class_id))
    acc_after = []
    class_after = []
    zeroed_counts = []
    current = DenseTensor.from_array(weights)
    for vec in concepts:
        current, _ = annihilate_weights(current, vec.direction,
                                        keep_frac=keep_frac)
        zeroed_counts.append(int(np.sum(np.all(current.array == 0.0, axis=1))))
        acc, pred = _head_accuracy(pooled_arr, labels,
                                   current.array.astype(np.float64), bias)
        acc_after.append(acc)
        class_after.append(float(np.mean(pred[class_mask] == class_id)))
    control_seeds = tuple(seed + i for i in range(n_random_seeds))
    controls = []
    d = weights.shape[0]
    for step in range(1, len(concepts) + 1):
        per_seed = []
        for s in control_seeds:
            rng = np.random.default_rng(s)
            ctrl = DenseTensor.from_array(weights)
            for _ in range(step):
                rand_dir = rng.standard_normal(d)
                rand_dir /= np.linalg.norm(rand_dir)
                ctrl, _ = annihilate_weights(ctrl, rand_dir,
                                             keep_frac=keep_frac)
            acc, _ = _head_accuracy(pooled_arr, labels,
                                    ctrl.array.astype(np.float64), bias)
            per_seed.append(acc)
        controls.append(tuple(per_seed))
    return AblationReport(
        class_id=class_id,
        concepts_removed=tuple(v.source for v in concepts),
        accuracy_before=base_acc,
        accuracy_after=tuple(acc_after),
        control_accuracy=tuple(controls),
        control_seeds=control_seeds,
        per_class_accuracy_before=base_class_acc,
        per_class_accuracy_after=tuple(class_after),
        zeroed_counts=tuple(zeroed_counts),
    )


def basis_alignment_stats(concept_vectors) -> dict:
    """Max |cosine| of each unit vector with the canonical basis + summary.

    For unit vectors this is simply the largest component magnitude.
    """
    vectors = list(concept_vectors)
    if not vectors:
        raise ValidationError("need at least one vector")
    per_vector = []
    for vec in vectors:
        arr = vec.direction.array if isinstance(vec, ConceptVector) else (
            vec.array if isinstance(vec, DenseTensor) else np.asarray(vec))
        per_vector.append(float(np.max(np.abs(arr))))
    return {
        "per_vector": per_vector,
        "max": max(per_vector),
        "mean": float(np.mean(per_vector)),
    }


def pgi_pgu(predict_proba, inputs: np.ndarray, explanations: np.ndarray,
            top_frac: float, noise_std: float = 0.3, n_perturb: int = 100,
            seed: int = 0) -> tuple[float, float]:
    """Prediction gaps under Gaussian noise on important/unimportant features.

    ``predict_proba(x)`` returns [n, K] class probabilities. Per input,
    the top ``ceil(top_frac * m)`` features by absolute explanation
    score are the important set; the gap is the absolute change of the
    originally predicted class's probability, averaged over inputs and
    ``n_perturb`` seeded perturbations.
    """
    if not 0.0 < top_frac < 1.0:
        raise ValidationError(f"top_frac must be in (0, 1), got {top_frac}")
    x = np.asarray(inputs, dtype=np.float64)
    expl = np.asarray(explanations, dtype=np.float64)
    if x.shape != expl.shape:
        raise ShapeError(f"explanations shape {expl.shape} != inputs {x.shape}")
    n, m = x.shape
    n_top = math.ceil(top_frac * m)
    important = np.zeros_like(x)
    for i in range(n):
        top = np.argsort(-np.abs(expl[i]), kind="stable")[:n_top]
        important[i, top] = 1.0
    base = np.asarray(predict_proba(x))
    pred_class = np.argmax(base, axis=1)
    base_p = base[np.arange(n), pred_class]
    rng = np.random.default_rng(seed)
    gap_imp = 0.0
    gap_unimp = 0.0
    for _ in range(n_perturb):
        noise = rng.normal(0.0, noise_std, x.shape) if noise_std > 0 else \
            np.zeros_like(x)
        p_imp = np.asarray(predict_proba(x + noise * important))
        p_unimp = np.asarray(predict_proba(x + noise * (1.0 - important)))
        gap_imp += float(np.mean(np.abs(
            base_p - p_imp[np.arange(n), pred_class])))
        gap_unimp += float(np.mean(np.abs(
            base_p - p_unimp[np.arange(n), pred_class])))
    return gap_imp / n_perturb, gap_unimp / n_perturb
