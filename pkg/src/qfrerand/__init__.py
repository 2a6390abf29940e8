"""Quadratic-form rerandomization for treatment-versus-control experiments."""

__version__ = "0.1.0"

from .assign import Assignment, RerandomizationResult, batch_accepted, complete_randomization, rerandomize
from .criteria import (
    BalanceCriterion,
    Custom,
    Euclidean,
    Mahalanobis,
    Oracle,
    PCARestricted,
    Ridge,
    SquaredEuclidean,
    WeightedEuclidean,
    build_criterion,
    choose_k_kaiser,
    choose_k_variance_explained,
    choose_k_weighted_eigenvalue,
    qform_value,
)
from .design import CovariateMatrix, DesignModel, MeanDifference, mean_difference, standardize
from .diagnostics import (
    NuFactors,
    OutcomeModel,
    delta_variance,
    drop_decision,
    frobenius_norm,
    generalized_eigen_residual,
    nu_factors_approx,
    nu_factors_mc,
    oracle_gain,
    post_rerand_covariance,
    post_rerand_covariance_pca,
    total_variance_reduction,
    variance_of_tauhat,
    worst_case_regret,
)
from .inference import InferenceResult, asymptotic_ci, diff_in_means, infer, randomization_ci, randomization_test
from .simulate import SimulationConfig, run_comparison, sample_eigenvalues, random_orthogonal, simulate_dataset
from .threshold import Threshold, calibrate, calibrate_exact_chisq, calibrate_gamma, calibrate_mc
