"""Concept discovery in neural network latent spaces.

Decomposes a layer's pooled activations with a deterministic SVD,
ranks the singular directions by class-contrasted output sensitivity,
disentangles polysemantic directions into cluster-centroid concept
vectors, and evaluates the findings by occlusion, weight annihilation,
outlier flagging, and prediction-gap faithfulness.
"""

from .discovery import (ConceptBasis, ConceptVector, RotatedBatch,
                        build_basis, discover, orient_toward_class,
                        rank_and_select, score_classes, score_regression)
from .disentangle import (ClusterOutcome, RefineConfig, hierarchical_cluster,
                          kmeans, polysemanticity_census,
                          reference_cut_height, refine_direction,
                          select_top_activating)
from .errors import (BadMagicError, CdiscoError, FormatError, NumericalError,
                     ShapeError, TruncatedPayloadError, UsageError,
                     ValidationError, VersionMismatchError)
from .evaluate import (AblationReport, ablation_with_control,
                       annihilate_weights, basis_alignment_stats,
                       occlude_concept, pgi_pgu, sdc)
from .explore import (OutlierReport, flag_outliers, flagged_accuracy,
                      project_2d, write_projection_csv)
from .interpret import (ConceptMap, concept_map, max_activating,
                        segmentation_mask, tabular_importance)
from .linalg import (SvdResult, cosine_similarity, iqr_bounds, svd,
                     symmetric_eigen)
from .store import ActivationDump, load_dump, save_dump, subset_by_class
from .tensor import (DenseTensor, LabeledBatch, elementwise_product,
                     percentile, pool_gap, read_tensor, write_pgm,
                     write_tensor)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
