import itertools
import math

import numpy as np
import pytest

from qfrerand.assign import batch_accepted, complete_randomization, rerandomize
from qfrerand.criteria import Euclidean, Mahalanobis, build_criterion, qform_value
from qfrerand.design import mean_difference
from qfrerand.errors import BadCounts, MaxDrawsExceeded
from qfrerand.threshold import Threshold, calibrate, calibrate_mc

from conftest import gaussian_design


def infinite_threshold(alpha=0.5):
    return Threshold(a=float("inf"), alpha_target=alpha, method="exact",
                     alpha_achieved=1.0, se=0.0)


def test_complete_randomization_counts():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = complete_randomization(4, 2, rng)
        assert int(w.w.sum()) == 2
    with pytest.raises(BadCounts):
        complete_randomization(4, 4, rng)
    with pytest.raises(BadCounts):
        complete_randomization(4, 0, rng)


def test_complete_randomization_uniform_over_patterns():
    rng = np.random.default_rng(1)
    counts = {}
    n_draws = 100_000
    for _ in range(n_draws):
        w = complete_randomization(4, 2, rng)
        counts[tuple(w.w)] = counts.get(tuple(w.w), 0) + 1
    assert len(counts) == 6
    se = math.sqrt((1 / 6) * (5 / 6) / n_draws)
    for count in counts.values():
        assert abs(count / n_draws - 1 / 6) <= 3.5 * se


def test_rerandomize_accepts_first_draw_with_infinite_cutoff(design3):
    crit = build_criterion(Mahalanobis(), design3)
    res = rerandomize(design3, crit, infinite_threshold(), np.random.default_rng(2))
    assert res.draws_used == 1
    assert res.q_value <= np.inf


def test_rerandomize_records_consistent_diagnostics(design3):
    crit = build_criterion(Mahalanobis(), design3)
    thr = calibrate(crit, 0.1, method="exact")
    res = rerandomize(design3, crit, thr, np.random.default_rng(3))
    assert res.q_value <= thr.a
    assert res.draws_used >= 1
    md = mean_difference(design3, res.assignment.w)
    assert np.allclose(md.scaled, res.mean_diff.scaled, atol=1e-12)
    assert qform_value(crit, md) == pytest.approx(res.q_value, rel=1e-12)


def test_rerandomize_below_enumerated_minimum_errors():
    design = gaussian_design(n=6, d=2, seed=4)
    crit = build_criterion(Mahalanobis(), design)
    q_min = min(
        qform_value(crit, mean_difference(design, _w(combo)))
        for combo in itertools.combinations(range(6), 3)
    )
    thr = Threshold(a=q_min * 0.99, alpha_target=0.01, method="exact",
                    alpha_achieved=0.01, se=0.0)
    with pytest.raises(MaxDrawsExceeded):
        rerandomize(design, crit, thr, np.random.default_rng(5), max_draws=2000)


def _w(combo):
    w = np.zeros(6, dtype=int)
    w[list(combo)] = 1
    return w


def test_rerandomize_mean_draws_near_inverse_alpha():
    design = gaussian_design(n=500, d=5, seed=6)
    crit = build_criterion(Mahalanobis(), design)
    thr = calibrate(crit, 0.01, method="exact")
    rng = np.random.default_rng(7)
    draws = [rerandomize(design, crit, thr, rng).draws_used for _ in range(200)]
    assert 60 <= np.mean(draws) <= 160


def test_mirror_assignment_also_accepted(design3):
    crit = build_criterion(Euclidean(), design3)
    thr = calibrate_mc(crit, 0.1, draws=100_000, seed=8)
    rng = np.random.default_rng(9)
    for _ in range(5):
        res = rerandomize(design3, crit, thr, rng)
        mirrored = mean_difference(design3, 1 - res.assignment.w)
        assert qform_value(crit, mirrored) == pytest.approx(res.q_value, rel=1e-10)


def test_batch_accepted_empty_and_deterministic(design3):
    crit = build_criterion(Mahalanobis(), design3)
    thr = calibrate(crit, 0.2, method="exact")
    assert batch_accepted(design3, crit, thr, 0, np.random.default_rng(0)) == []
    b1 = batch_accepted(design3, crit, thr, 20, np.random.default_rng(10))
    b2 = batch_accepted(design3, crit, thr, 20, np.random.default_rng(10))
    b4 = batch_accepted(design3, crit, thr, 20, np.random.default_rng(10), workers=4)
    for x, y in zip(b1, b2):
        assert np.array_equal(x.assignment.w, y.assignment.w)
    for x, y in zip(b1, b4):
        assert np.array_equal(x.assignment.w, y.assignment.w)
        assert x.q_value == y.q_value


def test_batch_accepted_mean_difference_centered():
    design = gaussian_design(n=60, d=3, seed=11)
    crit = build_criterion(Mahalanobis(), design)
    thr = calibrate(crit, 0.1, method="exact")
    batch = batch_accepted(design, crit, thr, 1000, np.random.default_rng(12))
    taus = np.array([res.mean_diff.scaled for res in batch])
    se = taus.std(axis=0, ddof=1) / math.sqrt(len(batch))
    assert np.all(np.abs(taus.mean(axis=0)) <= 3.5 * se)


def test_acceptance_rate_close_to_alpha():
    design = gaussian_design(n=400, d=3, seed=13)
    crit = build_criterion(Mahalanobis(), design)
    thr = calibrate(crit, 0.1, method="exact")
    batch = batch_accepted(design, crit, thr, 300, np.random.default_rng(14))
    total_draws = sum(res.draws_used for res in batch)
    rate = len(batch) / total_draws
    # reported, not asserted tightly: finite-sample drift is expected
    assert 0.05 <= rate <= 0.2
