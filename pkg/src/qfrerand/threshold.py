"""Acceptance-threshold calibration.

Under complete randomization the statistic ``Q_A(sqrt(n) tau_x)`` is
asymptotically a weighted chi-square, ``sum_j eta_j Z_j^2`` with iid
standard-normal ``Z_j``.  The cutoff ``a`` for a target acceptance
probability ``alpha`` is found three ways:

* ``calibrate_mc``      empirical alpha-quantile of Monte Carlo draws,
* ``calibrate_gamma``   moment-matched Gamma approximation (effective rank),
* ``calibrate_exact_chisq``  exact chi-square route when eta is identically 1
                        (Mahalanobis, or PCA-restricted Mahalanobis with
                        d replaced by k).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaln

from .criteria import BalanceCriterion
from .errors import DegenerateSpectrum, InputError, NotChiSquareCase, TooFewDraws
from .rng import CHUNK, STREAM_CALIBRATE, substream

_CONST_ETA_TOL = 1e-6


@dataclass(frozen=True)
class Threshold:
    a: float
    alpha_target: float
    method: str                 # "mc" | "gamma" | "exact"
    alpha_achieved: float
    se: float                   # MC standard error of alpha_achieved; 0 for analytic routes
    draws: int | None = None
    seed: int | None = None


def default_draws(alpha: float) -> int:
    return max(200_000, math.ceil(50.0 / alpha))


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must be in (0, 1), got {alpha}")


def _chunk_bounds(total: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + CHUNK, total)) for lo in range(0, total, CHUNK)]


def sample_qform_law(
    eta: np.ndarray, draws: int, seed: int, workers: int = 1, stream: int = STREAM_CALIBRATE
) -> np.ndarray:
    """Draws of sum_j eta_j Z_j^2, chunked so results do not depend on workers."""
    support = eta[eta > 0.0]
    bounds = _chunk_bounds(draws)

    def one(chunk_idx_lo_hi):
        idx, (lo, hi) = chunk_idx_lo_hi
        rng = substream(seed, stream, idx)
        z = rng.standard_normal((hi - lo, support.size))
        return (z * z) @ support

    jobs = list(enumerate(bounds))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(job) for job in jobs]
    return np.concatenate(parts)


def calibrate_mc(
    criterion: BalanceCriterion,
    alpha: float,
    draws: int | None = None,
    seed: int = 0,
    workers: int = 1,
) -> Threshold:
    """Cutoff as the linear-interpolation empirical alpha-quantile of MC draws."""
    _check_alpha(alpha)
    if draws is None:
        draws = default_draws(alpha)
    if draws < 10.0 / alpha:
        raise TooFewDraws(f"{draws} draws cannot resolve the {alpha} quantile; need >= {10 / alpha:.0f}")
    if np.sum(criterion.eta) <= 0.0:
        raise DegenerateSpectrum("all eta are zero; Q_A is identically 0")
    totals = sample_qform_law(criterion.eta, draws, seed, workers)
    a = float(np.quantile(totals, alpha))
    achieved = float(np.mean(totals <= a))
    se = math.sqrt(alpha * (1.0 - alpha) / draws)
    return Threshold(a=a, alpha_target=alpha, method="mc",
                     alpha_achieved=achieved, se=se, draws=draws, seed=seed)


def gamma_quantile(shape: float, scale: float, q: float, tol: float = 1e-10) -> float:
    """Invert the regularized incomplete gamma CDF by bisection plus Newton polish."""
    if shape <= 0 or scale <= 0:
        raise InputError("gamma shape and scale must be positive")
    _check_alpha(q)
    lo, hi = 0.0, max(shape, 1.0)
    while gammainc(shape, hi) < q:
        hi *= 2.0
        if hi > 1e308:
            raise InputError("gamma quantile bracket overflow")
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        if gammainc(shape, mid) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    x = 0.5 * (lo + hi)
    log_norm = gammaln(shape)
    for _ in range(8):
        if x <= 0:
            break
        pdf = math.exp((shape - 1.0) * math.log(x) - x - log_norm)
        if pdf <= 0:
            break
        step = (gammainc(shape, x) - q) / pdf
        nxt = x - step
        if not lo < nxt < hi:
            break
        x = nxt
        if abs(step) <= tol * max(1.0, x):
            break
    return x * scale


def chi2_cdf(x: float, df: float) -> float:
    return float(gammainc(df / 2.0, x / 2.0))


def chi2_quantile(q: float, df: float) -> float:
    return gamma_quantile(df / 2.0, 2.0, q)


def calibrate_gamma(criterion: BalanceCriterion, alpha: float) -> Threshold:
    """Moment-match the weighted chi-square with a single Gamma and invert it.

    Shape is half the effective rank tr(M)^2 / tr(M^2) of
    M = sigma^(1/2) A sigma^(1/2); exact whenever the nonzero eta are equal.
    """
    _check_alpha(alpha)
    s1 = float(np.sum(criterion.eta))
    s2 = float(np.sum(criterion.eta ** 2))
    if s1 <= 0.0:
        raise DegenerateSpectrum("all eta are zero; Q_A is identically 0")
    shape = s1 * s1 / (2.0 * s2)
    scale = 2.0 * s2 / s1
    a = gamma_quantile(shape, scale, alpha)
    return Threshold(a=a, alpha_target=alpha, method="gamma", alpha_achieved=alpha, se=0.0)


def calibrate_exact_chisq(d: int, alpha: float) -> Threshold:
    """Chi-square-d quantile; valid when the acceptance law is exactly chi^2_d."""
    if d < 1 or int(d) != d:
        raise InputError(f"d must be a positive integer, got {d}")
    _check_alpha(alpha)
    a = chi2_quantile(alpha, float(d))
    return Threshold(a=a, alpha_target=alpha, method="exact", alpha_achieved=alpha, se=0.0)


def _constant_support(criterion: BalanceCriterion) -> float | None:
    """The common value of the rank-supported eta, or None if not constant."""
    support = criterion.eta[: criterion.rank]
    if support.size == 0:
        return None
    top = support[0]
    if np.all(np.abs(support - top) <= _CONST_ETA_TOL * top):
        return float(support.mean())
    return None


def calibrate(
    criterion: BalanceCriterion,
    alpha: float,
    method: str = "mc",
    draws: int | None = None,
    seed: int = 0,
    workers: int = 1,
) -> Threshold:
    """Dispatch by method name; "auto" picks exact when the law is chi-square."""
    if method == "mc":
        return calibrate_mc(criterion, alpha, draws=draws, seed=seed, workers=workers)
    if method == "gamma":
        return calibrate_gamma(criterion, alpha)
    if method == "exact":
        const = _constant_support(criterion)
        if const is None or abs(const - 1.0) > _CONST_ETA_TOL:
            raise NotChiSquareCase(
                "exact calibration needs eta identically 1 "
                "(Mahalanobis or PCA-restricted Mahalanobis)"
            )
        return calibrate_exact_chisq(criterion.rank, alpha)
    if method == "auto":
        const = _constant_support(criterion)
        if const is not None:
            base = calibrate_exact_chisq(criterion.rank, alpha)
            return Threshold(a=const * base.a, alpha_target=alpha, method="exact",
                             alpha_achieved=alpha, se=0.0)
        return calibrate_mc(criterion, alpha, draws=draws, seed=seed, workers=workers)
    raise InputError(f"unknown calibration method {method!r}")
