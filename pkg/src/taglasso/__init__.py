"""Tree-aggregated graphical lasso: sparse, node-aggregated Gaussian graphical models."""

__version__ = "0.1.0"

from .model import (NotPositiveDefiniteError, PrecisionEstimate, SampleCovariance,
                    is_positive_definite, neg_log_likelihood, sample_covariance)
from .tree import (AggregatedPrecision, AggregationTree, AncestorMatrix, Partition, TreeNode,
                   aggregate_precision, ancestor_matrix, decode_partition, validate_tree)
from .solver import (DivergenceError, Penalties, SolverConfig, StructuredFactor, TagLassoFit,
                     fit_glasso, la_admm)
from .selection import (ConstraintSet, SelectionGrid, constrained_select, cross_validate,
                        lambda_grid, refit)

__all__ = [
    "AggregatedPrecision", "AggregationTree", "AncestorMatrix", "ConstraintSet",
    "DivergenceError", "NotPositiveDefiniteError", "Partition", "Penalties",
    "PrecisionEstimate", "SampleCovariance", "SelectionGrid", "SolverConfig",
    "StructuredFactor", "TagLassoFit", "TreeNode", "aggregate_precision", "ancestor_matrix",
    "constrained_select", "cross_validate", "decode_partition", "fit_glasso",
    "is_positive_definite", "la_admm", "lambda_grid", "neg_log_likelihood", "refit",
    "sample_covariance", "validate_tree",
]
