"""Variance-reduction diagnostics for quadratic-form rerandomization.

The central objects are the per-direction reduction factors

    nu_j = E[Z_j^2 | sum_i eta_i Z_i^2 <= a],

which scale the eigendirections of the post-rerandomization covariance
``sigma^(1/2) Omega diag(nu) Omega' sigma^(1/2)``.  They are estimated by
Monte Carlo, or approximated in closed form for small acceptance
probabilities.  On top of them sit covariance-size comparisons, the
variance of the difference-in-means estimator for a given outcome
projection, the known-beta oracle criterion, and its worst-case regret.
"""

from __future__ import annotations

import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil, exp, log, pi, sqrt

import numpy as np
from scipy.special import gammaln

from .criteria import BalanceCriterion, Oracle, build_criterion
from .design import DesignModel
from .errors import (
    DimensionMismatch,
    InputError,
    MissingOutcomeModel,
    NotPCACriterion,
    SingularSigma,
    TooFewAccepted,
    ZeroEta,
)
from .rng import CHUNK, STREAM_NU, STREAM_REGRET, substream
from .threshold import Threshold, chi2_cdf, chi2_quantile

_ZERO_ETA_TOL = 1e-12
_PERM_TOL = 1e-6


def _fingerprint(eta: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(eta).tobytes(), digest_size=8).hexdigest()


@dataclass(frozen=True)
class NuFactors:
    nu: np.ndarray
    se: np.ndarray
    method: str                 # "mc" | "approx" | "exact"
    draws: int | None = None
    accepted: int | None = None
    fingerprint: str | None = None

    @property
    def d(self) -> int:
        return self.nu.shape[0]


@dataclass(frozen=True)
class OutcomeModel:
    """Linear projection of the potential outcomes onto the covariates."""

    r_squared: float
    v_tautau: float
    beta: np.ndarray | None = None      # covariate space
    beta_z: np.ndarray | None = None    # principal-component space

    def __post_init__(self):
        if not 0.0 <= self.r_squared <= 1.0:
            raise InputError(f"r_squared must be in [0, 1], got {self.r_squared}")
        if self.v_tautau <= 0.0:
            raise InputError(f"v_tautau must be positive, got {self.v_tautau}")
        if self.beta is None and self.beta_z is None:
            raise MissingOutcomeModel("need beta or beta_z")
        for name in ("beta", "beta_z"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))

    def beta_x(self, design: DesignModel) -> np.ndarray:
        """Projection coefficients in covariate space."""
        if self.beta is not None:
            return self.beta
        return design.svd_v @ self.beta_z

    def beta_pc(self, design: DesignModel) -> np.ndarray:
        """Projection coefficients rotated onto the principal components."""
        if self.beta_z is not None:
            return self.beta_z
        return design.svd_v.T @ self.beta


def _check_nu(criterion_eta: np.ndarray, nu: NuFactors):
    if nu.d != criterion_eta.shape[0]:
        raise DimensionMismatch(f"nu has {nu.d} entries for a {criterion_eta.shape[0]}-d spectrum")
    if nu.fingerprint is not None and nu.fingerprint != _fingerprint(criterion_eta):
        raise InputError("nu factors were estimated for a different criterion")


def nu_factors_for_eta(
    eta: np.ndarray,
    a: float,
    draws: int,
    seed: int = 0,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, int]:
    """MC estimate of E[Z_j^2 | sum eta_j Z_j^2 <= a] with per-entry standard errors.

    Coordinates with eta_j = 0 are unconstrained, so their factor is pinned
    to exactly 1.  Chunked sampling keeps results worker-count independent.
    """
    eta = np.asarray(eta, dtype=float)
    d = eta.shape[0]
    top = eta.max(initial=0.0)
    active = eta > _ZERO_ETA_TOL * max(top, 1.0)

    bounds = [(lo, min(lo + CHUNK, draws)) for lo in range(0, draws, CHUNK)]

    def one(job):
        idx, (lo, hi) = job
        rng = substream(seed, STREAM_NU, idx)
        z2 = rng.standard_normal((hi - lo, d)) ** 2
        mask = z2[:, active] @ eta[active] <= a
        zacc = z2[mask]
        return zacc.sum(axis=0), (zacc ** 2).sum(axis=0), zacc.shape[0]

    jobs = list(enumerate(bounds))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(job) for job in jobs]

    s1 = np.sum([p[0] for p in parts], axis=0)
    s2 = np.sum([p[1] for p in parts], axis=0)
    m = int(sum(p[2] for p in parts))
    if m < 2:
        raise TooFewAccepted(f"only {m} of {draws} draws accepted")
    nu = s1 / m
    var = np.maximum(s2 / m - nu ** 2, 0.0)
    se = np.sqrt(var / m)
    nu[~active] = 1.0
    se[~active] = 0.0
    return nu, se, m


def nu_factors_mc(
    criterion: BalanceCriterion,
    threshold: Threshold,
    draws: int,
    seed: int = 0,
    workers: int = 1,
) -> NuFactors:
    """Monte Carlo reduction factors for the criterion's full spectrum."""
    if draws * threshold.alpha_target < 1000:
        raise TooFewAccepted(
            f"{draws} draws at alpha={threshold.alpha_target} expect fewer than "
            "1000 accepted; increase draws"
        )
    nu, se, m = nu_factors_for_eta(criterion.eta, threshold.a, draws, seed, workers)
    return NuFactors(nu=nu, se=se, method="mc", draws=draws, accepted=m,
                     fingerprint=_fingerprint(criterion.eta))


def nu_factors_pca_inner(
    criterion: BalanceCriterion,
    threshold: Threshold,
    draws: int,
    seed: int = 0,
    workers: int = 1,
) -> NuFactors:
    """Reduction factors of the k-component inner spectrum of a PCA criterion."""
    if criterion.pca_k is None:
        raise NotPCACriterion("criterion is not PCA-restricted")
    nu, se, m = nu_factors_for_eta(criterion.inner_eta, threshold.a, draws, seed, workers)
    return NuFactors(nu=nu, se=se, method="mc", draws=draws, accepted=m,
                     fingerprint=_fingerprint(criterion.inner_eta))


def p_dim(d: int) -> float:
    """Dimension constant of the small-alpha approximation; p_2 = 1/2."""
    log_ball = log(2.0) + (d / 2.0) * log(pi) - log(d) - float(gammaln(d / 2.0))
    return (2.0 * pi / (d + 2.0)) * exp(-(2.0 / d) * log_ball)


def nu_factors_approx(criterion: BalanceCriterion, alpha: float) -> NuFactors:
    """Small-alpha closed form: nu_j ~ (p_d / eta_j) det(M)^(1/d) alpha^(2/d).

    Requires every eta_j > 0.  Values above 1 (possible for large alpha or a
    tiny eta_j) are clamped with a warning.
    """
    eta = criterion.eta
    d = eta.shape[0]
    if eta[-1] <= _ZERO_ETA_TOL * max(eta[0], 1.0):
        raise ZeroEta("approximation needs a positive-definite spectrum")
    det_root = exp(np.mean(np.log(eta)))
    nu = (p_dim(d) / eta) * det_root * alpha ** (2.0 / d)
    if np.any(nu > 1.0):
        warnings.warn(
            "small-alpha approximation exceeded 1 for some directions; clamping",
            stacklevel=2,
        )
        nu = np.minimum(nu, 1.0)
    return NuFactors(nu=nu, se=np.zeros(d), method="approx",
                     fingerprint=_fingerprint(eta))


def chi2_ratio_reduction(dof: int, alpha: float) -> float:
    """Common factor P(chi2_{d+2} <= a) / P(chi2_d <= a) at a = chi2_d quantile."""
    a = chi2_quantile(alpha, float(dof))
    return chi2_cdf(a, dof + 2) / chi2_cdf(a, dof)


def post_rerand_covariance(
    design: DesignModel, criterion: BalanceCriterion, nu: NuFactors
) -> np.ndarray:
    """sigma^(1/2) Omega diag(nu) Omega' sigma^(1/2), symmetric PSD."""
    _check_nu(criterion.eta, nu)
    half = design.sigma_half
    core = criterion.omega @ np.diag(nu.nu) @ criterion.omega.T
    cov = half @ core @ half
    return (cov + cov.T) / 2.0


def post_rerand_covariance_pca(
    design: DesignModel, criterion: BalanceCriterion, nu_k: NuFactors
) -> np.ndarray:
    """Block form for a PCA-restricted criterion: reduced top-k, untouched rest."""
    if criterion.pca_k is None:
        raise NotPCACriterion("criterion is not PCA-restricted")
    k, d = criterion.pca_k, design.d
    _check_nu(criterion.inner_eta, nu_k)
    block = np.eye(d)
    block[:k, :k] = criterion.inner_omega @ np.diag(nu_k.nu) @ criterion.inner_omega.T
    half = design.sigma_half
    cov = half @ design.svd_v @ block @ design.svd_v.T @ half
    return (cov + cov.T) / 2.0


def frobenius_norm(cov: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(cov) ** 2)))


def total_variance_reduction(nu: NuFactors) -> float:
    return float(np.sum(1.0 - nu.nu))


def variance_of_tauhat(
    design: DesignModel,
    criterion: BalanceCriterion,
    nu: NuFactors,
    outcome: OutcomeModel,
) -> float:
    """Asymptotic variance of sqrt(n)(tauhat - tau) after rerandomization."""
    if outcome is None:
        raise MissingOutcomeModel("outcome model required")
    beta = outcome.beta_x(design)
    cov = post_rerand_covariance(design, criterion, nu)
    return float(beta @ cov @ beta + outcome.v_tautau * (1.0 - outcome.r_squared))


def delta_variance(
    design: DesignModel,
    criterion: BalanceCriterion,
    nu: NuFactors,
    beta_z: np.ndarray,
) -> float:
    """Variance removed relative to complete randomization.

    General form sum_j ((Omega' V)_j Lam^(1/2) beta_z)^2 (1 - nu_j); reduces
    to sum_j beta_z_j^2 lam_j (1 - nu_j) when the criterion shares sigma's
    eigenbasis.
    """
    beta_z = np.asarray(beta_z, dtype=float)
    if beta_z.shape != (design.d,):
        raise DimensionMismatch(f"beta_z has shape {beta_z.shape}, expected ({design.d},)")
    _check_nu(criterion.eta, nu)
    t = (criterion.omega.T @ design.svd_v) @ (np.sqrt(design.lam) * beta_z)
    return float(np.sum(t ** 2 * (1.0 - nu.nu)))


def _projected_variance(
    design: DesignModel, criterion: BalanceCriterion, nu: NuFactors, beta_z: np.ndarray
) -> float:
    """beta' Cov beta in the PC parametrization: sum_j t_j^2 nu_j."""
    t = (criterion.omega.T @ design.svd_v) @ (np.sqrt(design.lam) * beta_z)
    return float(np.sum(t ** 2 * nu.nu))


@dataclass(frozen=True)
class OracleGain:
    nu_star: float
    percent_reduction: float
    eta1: float


def oracle_nu_star(alpha: float) -> float:
    """E[Z^2 | eta1 Z^2 <= a] at matched alpha: a chi-square CDF ratio in 1 dof."""
    q = chi2_quantile(alpha, 1.0)
    return chi2_cdf(q, 3.0) / chi2_cdf(q, 1.0)


def oracle_gain(
    design: DesignModel,
    beta: np.ndarray,
    alpha: float,
    r_squared: float,
    seed: int = 0,
    method: str = "exact",
    draws: int = 500_000,
) -> OracleGain:
    """Reduction attained by the rank-one criterion beta beta' at matched alpha."""
    criterion = build_criterion(Oracle(beta=tuple(np.asarray(beta, dtype=float))), design)
    eta1 = float(criterion.eta[0])
    if method == "exact":
        nu_star = oracle_nu_star(alpha)
    elif method == "mc":
        q = chi2_quantile(alpha, 1.0)
        rng = substream(seed, STREAM_NU, 0)
        z2 = rng.standard_normal(draws) ** 2
        acc = z2[z2 <= q]
        if acc.size < 2:
            raise TooFewAccepted(f"only {acc.size} accepted draws")
        nu_star = float(acc.mean())
    else:
        raise InputError(f"unknown oracle method {method!r}")
    percent = 100.0 * (1.0 - nu_star) * r_squared
    return OracleGain(nu_star=nu_star, percent_reduction=percent, eta1=eta1)


@dataclass(frozen=True)
class RegretResult:
    regret: float
    se: float
    worst_beta_z: np.ndarray


def worst_case_regret(
    design: DesignModel,
    criterion: BalanceCriterion,
    c: float,
    alpha: float,
    grid_resolution: int = 0,
    seed: int = 0,
    nu: NuFactors | None = None,
    draws: int = 500_000,
    workers: int = 1,
) -> RegretResult:
    """Max over ||beta_z|| = c of |variance under the oracle - under the criterion|.

    The epsilon term common to both variances cancels, so only the projected
    parts are compared.  The grid is the coordinate vertices (where the
    maximizer lies) plus ``grid_resolution`` random sphere points.
    """
    if c <= 0:
        raise InputError(f"norm bound c must be positive, got {c}")
    d = design.d
    if nu is None:
        from .threshold import calibrate_mc

        thr = calibrate_mc(criterion, alpha, draws=max(draws, ceil(1000 / alpha)),
                           seed=seed, workers=workers)
        nu = nu_factors_mc(criterion, thr, draws=max(draws, ceil(1000 / alpha)),
                           seed=seed + 1, workers=workers)
    _check_nu(criterion.eta, nu)
    candidates = [c * np.eye(d)[j] for j in range(d)]
    if grid_resolution > 0:
        rng = substream(seed, STREAM_REGRET)
        raw = rng.standard_normal((grid_resolution, d))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        candidates.extend(c * raw)

    nu_star = oracle_nu_star(alpha)
    p = criterion.omega.T @ design.svd_v
    root_lam = np.sqrt(design.lam)
    best = RegretResult(regret=-1.0, se=0.0, worst_beta_z=candidates[0])
    for beta_z in candidates:
        t2 = (p @ (root_lam * beta_z)) ** 2
        v_crit = float(np.sum(t2 * nu.nu))
        v_opt = nu_star * float(np.sum(design.lam * beta_z ** 2))
        gap = abs(v_crit - v_opt)
        if gap > best.regret:
            se = float(np.sqrt(np.sum(t2 ** 2 * nu.se ** 2)))
            best = RegretResult(regret=gap, se=se, worst_beta_z=np.asarray(beta_z))
    return best


def nu_per_component(
    design: DesignModel, criterion: BalanceCriterion, nu: NuFactors
) -> np.ndarray:
    """Reduction factors re-indexed by principal component.

    Valid only when the criterion shares sigma's eigenbasis, i.e. Omega' V is
    a signed permutation; raises otherwise.
    """
    _check_nu(criterion.eta, nu)
    p = np.abs(criterion.omega.T @ design.svd_v)
    perm = np.argmax(p, axis=0)
    ok = (
        len(set(perm.tolist())) == design.d
        and np.all(np.abs(p[perm, np.arange(design.d)] - 1.0) < _PERM_TOL)
    )
    if not ok:
        raise InputError("criterion does not share sigma's eigenbasis")
    return nu.nu[perm]


def drop_decision(
    design: DesignModel,
    k: int,
    criterion_d: BalanceCriterion,
    criterion_k: BalanceCriterion,
    beta_z: np.ndarray,
    nu_d: NuFactors,
    nu_k: NuFactors,
) -> bool:
    """True when restricting to the top k components lowers the estimator variance.

    Compares the projected variance under the full-dimension criterion with
    the projected variance under the k-component criterion (reduced top
    block plus untouched bottom block).  With shared eigenbases this is the
    gains-versus-losses inequality on the weighted eigenvalues.
    """
    beta_z = np.asarray(beta_z, dtype=float)
    if beta_z.shape != (design.d,):
        raise DimensionMismatch(f"beta_z has shape {beta_z.shape}, expected ({design.d},)")
    if criterion_k.pca_k != k:
        raise NotPCACriterion(f"criterion_k is restricted to {criterion_k.pca_k}, not k={k}")
    _check_nu(criterion_d.eta, nu_d)
    _check_nu(criterion_k.inner_eta, nu_k)

    v_full = _projected_variance(design, criterion_d, nu_d, beta_z)
    t_k = criterion_k.inner_omega.T @ (np.sqrt(design.lam[:k]) * beta_z[:k])
    v_restricted = float(np.sum(t_k ** 2 * nu_k.nu)) + float(
        np.sum(beta_z[k:] ** 2 * design.lam[k:])
    )
    return v_full >= v_restricted


def generalized_eigen_residual(
    design: DesignModel,
    criterion: BalanceCriterion,
    nu: NuFactors,
    cov: np.ndarray | None = None,
) -> np.ndarray:
    """|det(cov - nu_j sigma)| / det(sigma) for each candidate factor nu_j.

    Near-zero residuals certify that the nu are the generalized eigenvalues
    of (cov, sigma).  ``cov`` defaults to the model covariance implied by the
    criterion and nu; pass an independently obtained covariance (for example
    the empirical covariance of accepted draws) to make the check
    non-circular.
    """
    if design.rank() < design.d:
        raise SingularSigma("generalized eigenvalues need an invertible sigma")
    if cov is None:
        cov = post_rerand_covariance(design, criterion, nu)
    else:
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (design.d, design.d):
            raise DimensionMismatch(f"covariance is {cov.shape}, expected square of {design.d}")
    det_sigma = float(np.linalg.det(design.sigma))
    out = np.empty(nu.d)
    for j, nu_j in enumerate(nu.nu):
        out[j] = abs(float(np.linalg.det(cov - nu_j * design.sigma))) / abs(det_sigma)
    return out
