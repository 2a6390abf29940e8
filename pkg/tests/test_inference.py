import math

import numpy as np
import pytest
from scipy import stats

from qfrerand.assign import complete_randomization, rerandomize
from qfrerand.criteria import Mahalanobis, build_criterion
from qfrerand.errors import DegenerateOutcomes, LengthMismatch
from qfrerand.inference import (
    asymptotic_ci,
    diff_in_means,
    estimate_outcome_model,
    randomization_ci,
    randomization_test,
)
from qfrerand.threshold import Threshold, calibrate

from conftest import gaussian_design


def test_diff_in_means_values():
    assert diff_in_means(np.array([1, 1, 0, 0]), np.array([1.0, 2, 3, 4])) == -2.0
    assert diff_in_means(np.array([1, 0, 1, 0]), np.full(4, 3.3)) == 0.0
    rng = np.random.default_rng(0)
    y = rng.standard_normal(30)
    w = np.zeros(30, dtype=int)
    w[rng.permutation(30)[:12]] = 1
    brute = y[w == 1].sum() / 12 - y[w == 0].sum() / 18
    assert diff_in_means(w, y) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(LengthMismatch):
        diff_in_means(np.array([1, 0]), np.array([1.0, 2, 3]))


def _experiment(n=40, d=2, seed=0, alpha=0.2, effect=0.0, noise=1.0, beta_scale=1.0):
    design = gaussian_design(n=n, d=d, seed=seed)
    crit = build_criterion(Mahalanobis(), design)
    thr = calibrate(crit, alpha, method="exact")
    rng = np.random.default_rng(seed + 1000)
    beta = beta_scale * np.arange(1, d + 1, dtype=float)
    y0 = design.x_std @ beta + noise * rng.standard_normal(n)
    w = rerandomize(design, crit, thr, rng).assignment.w
    y = y0 + effect * w
    return design, crit, thr, w, y, y0


def test_randomization_test_tie_edge_gives_one():
    design, crit, thr, w, _, _ = _experiment(seed=1)
    y_const = np.full(design.n, 2.5)
    p = randomization_test(design, crit, thr, w, y_const, 0.0, 99,
                           np.random.default_rng(2))
    assert p == 1.0


def test_randomization_test_extreme_observed_gives_floor():
    design, crit, thr, w, _, _ = _experiment(seed=3, noise=1.0)
    # observed outcomes aligned with w beyond anything replicates can match
    y = 1000.0 * w + np.random.default_rng(4).standard_normal(design.n)
    p = randomization_test(design, crit, thr, w, y, 0.0, 200,
                           np.random.default_rng(5))
    assert p == pytest.approx(1 / 201)


def test_randomization_test_deterministic_and_bounded():
    design, crit, thr, w, y, _ = _experiment(seed=6, effect=0.5)
    p1 = randomization_test(design, crit, thr, w, y, 0.0, 199, np.random.default_rng(7))
    p2 = randomization_test(design, crit, thr, w, y, 0.0, 199, np.random.default_rng(7))
    assert p1 == p2
    assert 1 / 200 <= p1 <= 1.0


def test_randomization_test_size_quick():
    rejections = 0
    n_exp = 150
    for seed in range(n_exp):
        design, crit, thr, w, y, _ = _experiment(n=30, d=2, seed=seed, alpha=0.25)
        p = randomization_test(design, crit, thr, w, y, 0.0, 199,
                               np.random.default_rng(10_000 + seed))
        rejections += p <= 0.05
    rate = rejections / n_exp
    assert 0.005 <= rate <= 0.11   # 3+ binomial s.e. around 0.05


def test_randomization_ci_nested_and_contains_truth():
    design, crit, thr, w, y, _ = _experiment(n=60, d=2, seed=8, effect=1.0)
    ci95 = randomization_ci(design, crit, thr, w, y, 0.95, 800, np.random.default_rng(9))
    ci80 = randomization_ci(design, crit, thr, w, y, 0.80, 800, np.random.default_rng(9))
    assert ci95[0] <= ci80[0] <= ci80[1] <= ci95[1]
    assert ci95[0] <= 1.0 <= ci95[1]
    tau_hat = diff_in_means(w, y)
    assert ci95[0] <= tau_hat <= ci95[1]


def test_asymptotic_ci_matches_neyman_when_uncorrelated():
    # outcomes independent of covariates: conditioning has no effect
    design = gaussian_design(n=200, d=2, seed=10)
    crit = build_criterion(Mahalanobis(), design)
    thr = calibrate(crit, 0.1, method="exact")
    rng = np.random.default_rng(11)
    w = complete_randomization(design.n, design.n1, rng).w
    y = rng.standard_normal(design.n) + 0.4 * w
    lo, hi = asymptotic_ci(design, crit, thr, w, y, 0.95, draws=40_000, seed=12)
    outcome = estimate_outcome_model(design, w, y)
    neyman_half = stats.norm.ppf(0.975) * math.sqrt(outcome.v_tautau / design.n)
    half = (hi - lo) / 2
    assert half == pytest.approx(neyman_half, rel=0.05)


def test_asymptotic_ci_infinite_cutoff_is_neyman():
    design = gaussian_design(n=150, d=3, seed=13)
    crit = build_criterion(Mahalanobis(), design)
    thr = Threshold(a=float("inf"), alpha_target=0.9999, method="exact",
                    alpha_achieved=1.0, se=0.0)
    rng = np.random.default_rng(14)
    w = complete_randomization(design.n, design.n1, rng).w
    y = design.x_std @ np.array([1.0, -0.5, 0.2]) + rng.standard_normal(design.n)
    lo, hi = asymptotic_ci(design, crit, thr, w, y, 0.95, draws=40_000, seed=15)
    outcome = estimate_outcome_model(design, w, y)
    neyman_half = stats.norm.ppf(0.975) * math.sqrt(outcome.v_tautau / design.n)
    assert (hi - lo) / 2 == pytest.approx(neyman_half, rel=0.05)


def test_asymptotic_ci_narrower_with_balance():
    # strong covariate signal plus a tight criterion shortens the interval
    design = gaussian_design(n=200, d=3, seed=16)
    crit = build_criterion(Mahalanobis(), design)
    tight = calibrate(crit, 0.01, method="exact")
    loose = Threshold(a=float("inf"), alpha_target=0.9999, method="exact",
                      alpha_achieved=1.0, se=0.0)
    rng = np.random.default_rng(17)
    w = rerandomize(design, crit, tight, rng).assignment.w
    y = design.x_std @ np.array([2.0, 1.0, -1.0]) + 0.3 * rng.standard_normal(design.n)
    lo_t, hi_t = asymptotic_ci(design, crit, tight, w, y, 0.95, draws=30_000, seed=18)
    lo_l, hi_l = asymptotic_ci(design, crit, loose, w, y, 0.95, draws=30_000, seed=18)
    assert hi_t - lo_t < hi_l - lo_l


def test_asymptotic_ci_worker_independent():
    design, crit, thr, w, y, _ = _experiment(n=60, d=2, seed=26, effect=0.5)
    ci1 = asymptotic_ci(design, crit, thr, w, y, 0.9, draws=30_000, seed=27, workers=1)
    ci4 = asymptotic_ci(design, crit, thr, w, y, 0.9, draws=30_000, seed=27, workers=4)
    assert ci1 == ci4


def test_estimate_outcome_model_recovers_projection():
    design = gaussian_design(n=400, d=3, seed=19)
    rng = np.random.default_rng(20)
    beta = np.array([1.5, -0.7, 0.3])
    w = complete_randomization(design.n, design.n1, rng).w
    y = design.x_std @ beta + 0.5 * rng.standard_normal(design.n)
    outcome = estimate_outcome_model(design, w, y)
    assert 0.5 <= outcome.r_squared <= 1.0
    # the 1/p, 1/(1-p) pooling cancels the sigma scaling, so beta_hat is in
    # the per-unit outcome scale
    assert np.allclose(outcome.beta, beta, atol=0.35)
    assert np.allclose(outcome.beta_pc(design), design.svd_v.T @ outcome.beta, atol=1e-10)


def test_estimate_outcome_model_handles_collinearity():
    col = np.random.default_rng(21).standard_normal(80)
    from conftest import make_matrix
    from qfrerand.design import standardize

    design = standardize(make_matrix(np.column_stack([col, col, np.random.default_rng(22).standard_normal(80)])), 0.5)
    rng = np.random.default_rng(23)
    w = complete_randomization(80, 40, rng).w
    y = col + rng.standard_normal(80)
    outcome = estimate_outcome_model(design, w, y)
    assert np.all(np.isfinite(outcome.beta))


def test_degenerate_outcomes_rejected():
    design = gaussian_design(n=30, d=2, seed=24)
    w = complete_randomization(30, 15, np.random.default_rng(25)).w
    with pytest.raises(DegenerateOutcomes):
        estimate_outcome_model(design, w, np.zeros(30))
