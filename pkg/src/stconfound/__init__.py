"""Poisson spatio-temporal areal mixed models with confounding control.

Fits disease-mapping style count models with intrinsic spatial,
random-walk temporal and fully structured interaction random effects by
penalized quasi-likelihood, and alleviates the confounding between
fixed and random effects either by restricted regression (orthogonal
projection of the random-effect designs) or by orthogonality
constraints (singular prior covariances built from oblique projections).
"""

import importlib.metadata

from .diagnostics import (
    ComparisonRow,
    CorrelationDiagnostic,
    ModelComparison,
    PatternDecomposition,
    aic,
    comparison_row,
    confounding_correlations,
    decompose_patterns,
    effective_df,
    poisson_deviance,
)
from .errors import (
    CollinearityError,
    ConvergenceError,
    DisconnectedGraphError,
    IllPosedConstraintsError,
    NumericalError,
    ValidationError,
)
from .io import (
    load_dataset,
    load_fit,
    parse_scenario_file,
    read_adjacency,
    save_adjacency,
    save_comparison,
    save_correlations,
    save_dataset,
    save_patterns,
    save_truth,
    serialize_fit,
)
from .model import (
    Dataset,
    DesignBundle,
    ModelSpec,
    RandomBlock,
    StandardizationRecord,
    build_design,
    expected_counts,
    standardize_covariates,
)
from .pql import (
    FitResult,
    InnerFit,
    PQLOptions,
    PQLState,
    VarianceComponents,
    fit,
    irls_inner,
    update_variance_components,
    warm_start_from,
)
from .projections import (
    ConstrainedCovariance,
    ConstraintSet,
    WeightedProjector,
    constrained_covariance,
    constraint_matrices,
    kriging_covariance,
    oblique_projector,
    weighted_projector,
)
from .simulate import (
    Scenario,
    StudyDesign,
    StudyResult,
    TruthRecord,
    default_scenario,
    generate,
    replicate_study,
)
from .structures import (
    ModelStructures,
    PrecisionSpectrum,
    SpatialGraph,
    build_rw1_precision,
    build_spatial_precision,
    build_structures,
    interaction_eigenstructure,
    spectral_split,
)

try:
    __version__ = importlib.metadata.version("stconfound")
except importlib.metadata.PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = [
    "CollinearityError",
    "ComparisonRow",
    "ConstrainedCovariance",
    "ConstraintSet",
    "ConvergenceError",
    "CorrelationDiagnostic",
    "Dataset",
    "DesignBundle",
    "DisconnectedGraphError",
    "FitResult",
    "IllPosedConstraintsError",
    "InnerFit",
    "ModelComparison",
    "ModelSpec",
    "ModelStructures",
    "NumericalError",
    "PQLOptions",
    "PQLState",
    "PatternDecomposition",
    "PrecisionSpectrum",
    "RandomBlock",
    "Scenario",
    "SpatialGraph",
    "StandardizationRecord",
    "StudyDesign",
    "StudyResult",
    "TruthRecord",
    "ValidationError",
    "VarianceComponents",
    "WeightedProjector",
    "aic",
    "build_design",
    "build_rw1_precision",
    "build_spatial_precision",
    "build_structures",
    "comparison_row",
    "confounding_correlations",
    "constrained_covariance",
    "constraint_matrices",
    "decompose_patterns",
    "default_scenario",
    "effective_df",
    "expected_counts",
    "fit",
    "generate",
    "interaction_eigenstructure",
    "irls_inner",
    "kriging_covariance",
    "load_dataset",
    "load_fit",
    "oblique_projector",
    "parse_scenario_file",
    "poisson_deviance",
    "read_adjacency",
    "replicate_study",
    "save_adjacency",
    "save_comparison",
    "save_correlations",
    "save_dataset",
    "save_patterns",
    "save_truth",
    "serialize_fit",
    "spectral_split",
    "standardize_covariates",
    "update_variance_components",
    "warm_start_from",
    "weighted_projector",
]
