"""Functional additive mixed models.

Penalized tensor-product regression for functional responses with
spline- and FPC-based terms, REML smoothing-parameter selection,
pointwise confidence bands and a simulation harness.
"""

__version__ = "0.1.0"

from .basis import (
    bspline_basis,
    difference_penalty,
    kronecker_sum_penalty,
    row_tensor,
    trapezoid_weights,
)
from .constraints import absorb_sum_to_zero_per_t, effective_rank, nullspace_overlap
from .data import (
    CurveRecord,
    FunctionalCovariate,
    FunctionalDataset,
    build_dataset,
    center_functional_covariate,
)
from .fpca import FpcaResult, eigen_truncate, estimate_covariance, estimate_scores, fpca, reconstruct
from .inference import coef_with_ci, fitted_with_ci, predict, residual_curves, term_contributions
from .simulation import SimConfig, generate_scenario, rimse, run_study
from .solver import (
    DesignSystem,
    FittedModel,
    assemble_model,
    fit_fpc_random_intercept_loop,
    fit_model,
    fit_penalized,
    optimize_reml,
    reml_criterion,
)
from .spec import ModelSpec, parse_model_spec, serialize_model_spec
from .terms import TensorTerm, TermSpec, build_term
