"""Profile maximum likelihood for clustered linear mixed models.

Fits y_i = X_i beta + Z_i b_i + eps_i with diagonal random-effect covariance,
gives classical and fixed-cluster-count chi-square intervals for the
random-effect variances, empirical BLUPs, and simulation-study tooling.
"""

from .inference import (ConfidenceInterval, chisq_quantile, classical_ci, fixedm_ci,
                        normal_quantile)
from .kernel import apply_hinv, build_kernel, logdet_h, quad_form
from .likelihood import (gls_beta, grad_theta, grad_v2, neg2loglik, profile_objective,
                         profiled_v2)
from .model import Cluster, Dataset, ModelSpec, TrueParams, read_csv, select_design, validate
from .optimize import FitOptions, MLFit, fit, method_of_moments_start
from .prediction import blup, d_statistic, expected_gap, ls_predict
from .simulation import Scenario, generate, gaussian_stream, load_scenario, run_study

__all__ = [
    "Cluster", "Dataset", "ModelSpec", "TrueParams", "read_csv", "select_design", "validate",
    "build_kernel", "apply_hinv", "quad_form", "logdet_h",
    "gls_beta", "profiled_v2", "neg2loglik", "profile_objective", "grad_v2", "grad_theta",
    "FitOptions", "MLFit", "fit", "method_of_moments_start",
    "ConfidenceInterval", "normal_quantile", "chisq_quantile", "classical_ci", "fixedm_ci",
    "blup", "ls_predict", "d_statistic", "expected_gap",
    "Scenario", "generate", "gaussian_stream", "load_scenario", "run_study",
]
