"""Rank-score debiased inference for heterogeneous quantile treatment
effects under high-dimensional covariates.

Pipeline: weighted l1-penalized quantile regression pilots, difference-
quotient conditional densities, a cross-validated rank-score debiasing
program solved in its dual form, and Gaussian inference (pointwise CIs,
uniform bands, integrated effects) for alpha(tau; z) = Q1(tau; z) -
Q0(tau; z).
"""
from ._backend import backend_name
from .data import Dataset, load_csv, write_csv
from .debias import (DebiasProblem, DebiasWeights, DualSolution, GammaCv,
                     cross_validate_gamma, default_gamma_grid, dual_objective,
                     primal_gap, primal_objective, recover_weights,
                     select_gamma, solve_dual, solve_primal_oracle)
from .density import (DensitySlice, bandwidth, densities_from_coefficients,
                      estimate_densities)
from .exceptions import (ConvergenceError, DataError, DualUnboundedError,
                         EstimationError, RankScoreError)
from .inference import (ArmEstimate, CqfEstimate, EstimateOptions, HqteResult,
                        covariance_matrix, debiased_cqf, estimate_full, hqte,
                        integrated_hqte, pointwise_ci, uniform_band,
                        variance_dual, variance_primal)
from .qr import (QrFit, SolverSettings, check_loss, check_loss_prox,
                 penalty_loadings, qr_objective, rank_score, refit_qr,
                 select_lambda, solve_penalized_qr)
from .simulation import (ESTIMATORS, McMetrics, SimDesign, comparator_fit,
                         generate_dataset, run_monte_carlo)

__version__ = "0.1.0"

__all__ = [
    "ArmEstimate", "ConvergenceError", "CqfEstimate", "DataError", "Dataset",
    "DebiasProblem", "DebiasWeights", "DensitySlice", "DualSolution",
    "DualUnboundedError", "ESTIMATORS", "EstimateOptions", "EstimationError",
    "GammaCv", "HqteResult", "McMetrics", "QrFit", "RankScoreError",
    "SimDesign", "SolverSettings", "backend_name", "bandwidth", "check_loss",
    "check_loss_prox", "comparator_fit", "covariance_matrix",
    "cross_validate_gamma", "debiased_cqf", "default_gamma_grid",
    "densities_from_coefficients", "dual_objective", "estimate_densities",
    "estimate_full", "generate_dataset", "hqte", "integrated_hqte",
    "load_csv", "penalty_loadings", "pointwise_ci", "primal_gap",
    "primal_objective", "qr_objective", "rank_score", "recover_weights",
    "refit_qr", "run_monte_carlo", "select_gamma", "select_lambda",
    "solve_dual", "solve_penalized_qr", "solve_primal_oracle", "uniform_band",
    "variance_dual", "variance_primal", "write_csv",
]
