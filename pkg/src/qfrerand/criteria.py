"""Balance criteria: the PSD matrix behind each rerandomization method.

Every supported method is a choice of PSD matrix ``A`` in the statistic
``Q_A(v) = v' A v`` evaluated at ``v = sqrt(n) * tau_x``:

    Mahalanobis           sigma^-1
    Euclidean             I
    SquaredEuclidean(c)   sigma^c          (eta_j = lam_j^(c+1))
    Ridge(r)              (sigma + r I)^-1
    WeightedEuclidean(w)  diag(w)
    PCARestricted(k, .)   inner criterion applied to the top-k principal
                          component mean differences, lifted back to
                          covariate space
    Oracle(beta)          beta beta'
    Custom(A)             any symmetric PSD matrix

A built ``BalanceCriterion`` carries the spectrum ``(eta, omega)`` of
``sigma^(1/2) A sigma^(1/2)``, which governs both the acceptance law
``sum_j eta_j Z_j^2`` and the per-direction variance reductions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import stats

from .design import DesignModel, MeanDifference, fix_signs
from .errors import (
    DimensionMismatch,
    InputError,
    NotPSD,
    NuEstimationFailed,
    RankTooLarge,
    SingularSigma,
    ZeroBeta,
)
from .rng import STREAM_NU, substream

_RANK_TOL = 1e-10
_SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class Mahalanobis:
    pass


@dataclass(frozen=True)
class Euclidean:
    pass


@dataclass(frozen=True)
class SquaredEuclidean:
    c: float = 1.0

    def __post_init__(self):
        if self.c < 0:
            raise InputError(f"exponent c must be >= 0, got {self.c}")


@dataclass(frozen=True)
class Ridge:
    ridge_lambda: float

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise InputError(f"ridge lambda must be >= 0, got {self.ridge_lambda}")


@dataclass(frozen=True)
class WeightedEuclidean:
    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w <= 0 for w in self.weights):
            raise InputError("weights must all be positive")


@dataclass(frozen=True)
class PCARestricted:
    k: int
    inner: "CriterionKind" = Mahalanobis()

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k}")
        if isinstance(self.inner, PCARestricted):
            raise InputError("PCARestricted cannot nest another PCARestricted")


@dataclass(frozen=True)
class Oracle:
    beta: tuple[float, ...]


@dataclass(frozen=True)
class Custom:
    a_matrix: np.ndarray


CriterionKind = Union[
    Mahalanobis, Euclidean, SquaredEuclidean, Ridge,
    WeightedEuclidean, PCARestricted, Oracle, Custom,
]


@dataclass(frozen=True)
class BalanceCriterion:
    kind: CriterionKind
    a_matrix: np.ndarray
    eta: np.ndarray            # eigenvalues of sigma^(1/2) A sigma^(1/2), descending
    omega: np.ndarray          # eigenvectors, columns matching eta
    rank: int
    # Populated for PCARestricted only: spectrum of Lam_k^(1/2) A_k Lam_k^(1/2).
    pca_k: int | None = None
    inner_eta: np.ndarray | None = None
    inner_omega: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.a_matrix.shape[0]


def _sigma_power(design: DesignModel, power: float) -> np.ndarray:
    lam = np.clip(design.lam, 0.0, None)
    out = design.gamma @ np.diag(np.power(lam, power)) @ design.gamma.T
    return (out + out.T) / 2.0


def _require_full_rank(design: DesignModel):
    if design.lam[0] <= 0 or design.lam[-1] <= _RANK_TOL * design.lam[0]:
        raise SingularSigma(
            "criterion needs an invertible sigma; a covariate direction has "
            "(numerically) zero variance"
        )


def _matrix_for(kind: CriterionKind, sigma_lam: np.ndarray) -> np.ndarray:
    """A-matrix for ``kind`` against a diagonal spectrum (PCA inner case)."""
    if isinstance(kind, Mahalanobis):
        if sigma_lam[-1] <= _RANK_TOL * sigma_lam[0]:
            raise SingularSigma("top-k spectrum not invertible")
        return np.diag(1.0 / sigma_lam)
    if isinstance(kind, Euclidean):
        return np.eye(len(sigma_lam))
    if isinstance(kind, SquaredEuclidean):
        return np.diag(np.power(sigma_lam, kind.c))
    if isinstance(kind, Ridge):
        return np.diag(1.0 / (sigma_lam + kind.ridge_lambda))
    if isinstance(kind, WeightedEuclidean):
        w = np.asarray(kind.weights, dtype=float)
        if len(w) != len(sigma_lam):
            raise DimensionMismatch(f"{len(w)} weights for {len(sigma_lam)} components")
        return np.diag(w)
    if isinstance(kind, Custom):
        return _validated_custom(kind.a_matrix, len(sigma_lam))
    raise InputError(f"kind {type(kind).__name__} not supported inside PCARestricted")


def _validated_custom(a: np.ndarray, d: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (d, d):
        raise DimensionMismatch(f"custom matrix is {a.shape}, expected ({d}, {d})")
    scale = np.max(np.abs(a))
    if scale > 0 and np.max(np.abs(a - a.T)) > _SYMMETRY_TOL * scale:
        raise NotPSD("custom matrix is not symmetric")
    a = (a + a.T) / 2.0
    eigvals = np.linalg.eigvalsh(a)
    if eigvals[-1] > 0 and eigvals[0] < -_RANK_TOL * eigvals[-1]:
        raise NotPSD(f"custom matrix has negative eigenvalue {eigvals[0]:.3e}")
    return a


def build_criterion(kind: CriterionKind, design: DesignModel) -> BalanceCriterion:
    """Materialize ``kind`` as a PSD matrix with its (eta, omega) spectrum."""
    d = design.d
    pca_k = None
    inner_eta = None
    inner_omega = None

    if isinstance(kind, Mahalanobis):
        _require_full_rank(design)
        a = _sigma_power(design, -1.0)
    elif isinstance(kind, Euclidean):
        a = np.eye(d)
    elif isinstance(kind, SquaredEuclidean):
        a = _sigma_power(design, kind.c)
    elif isinstance(kind, Ridge):
        if kind.ridge_lambda == 0.0:
            _require_full_rank(design)
        inv = design.gamma @ np.diag(1.0 / (design.lam + kind.ridge_lambda)) @ design.gamma.T
        a = (inv + inv.T) / 2.0
    elif isinstance(kind, WeightedEuclidean):
        w = np.asarray(kind.weights, dtype=float)
        if len(w) != d:
            raise DimensionMismatch(f"{len(w)} weights for {d} covariates")
        a = np.diag(w)
    elif isinstance(kind, PCARestricted):
        usable = design.rank()
        if kind.k > usable:
            raise RankTooLarge(kind.k, usable)
        pca_k = kind.k
        lam_k = design.lam[: kind.k]
        v_k = design.svd_v[:, : kind.k]
        a_k = _matrix_for(kind.inner, lam_k)
        m_k = np.diag(np.sqrt(lam_k)) @ a_k @ np.diag(np.sqrt(lam_k))
        m_k = (m_k + m_k.T) / 2.0
        vals, vecs = np.linalg.eigh(m_k)
        order = np.argsort(vals)[::-1]
        inner_eta = np.clip(vals[order], 0.0, None)
        inner_omega = fix_signs(vecs[:, order])
        a = v_k @ a_k @ v_k.T
        a = (a + a.T) / 2.0
    elif isinstance(kind, Oracle):
        beta = np.asarray(kind.beta, dtype=float)
        if beta.shape != (d,):
            raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({d},)")
        if not np.all(np.isfinite(beta)) or np.all(beta == 0.0):
            raise ZeroBeta("oracle beta must be finite and nonzero")
        a = np.outer(beta, beta)
    elif isinstance(kind, Custom):
        a = _validated_custom(kind.a_matrix, d)
    else:
        raise InputError(f"unknown criterion kind {type(kind).__name__}")

    half = design.sigma_half
    m = half @ a @ half
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    eta = vals[order]
    top = max(eta[0], 0.0)
    # Custom input is PSD-checked strictly on A itself; negatives here can
    # only be round-off from forming the triple product on an ill-conditioned
    # sigma, so the guard allows that noise before clamping.
    if top > 0 and eta[-1] < -1e-6 * top:
        raise NotPSD(f"criterion spectrum has negative eigenvalue {eta[-1]:.3e}")
    eta = np.clip(eta, 0.0, None)
    omega = fix_signs(vecs[:, order])
    rank = int(np.sum(eta > _RANK_TOL * top)) if top > 0 else 0

    return BalanceCriterion(
        kind=kind, a_matrix=a, eta=eta, omega=omega, rank=rank,
        pca_k=pca_k, inner_eta=inner_eta, inner_omega=inner_omega,
    )


def qform_value(criterion: BalanceCriterion, md: MeanDifference) -> float:
    """Q_A at the scaled mean difference; nonnegative for PSD A."""
    v = md.scaled
    if v.shape != (criterion.d,):
        raise DimensionMismatch(f"mean difference has shape {v.shape}, criterion is {criterion.d}-d")
    return max(float(v @ criterion.a_matrix @ v), 0.0)


def qform_values(criterion: BalanceCriterion, scaled: np.ndarray) -> np.ndarray:
    """Vectorized Q_A over rows of ``scaled`` (m x d)."""
    if scaled.shape[1] != criterion.d:
        raise DimensionMismatch(f"columns {scaled.shape[1]} != criterion dim {criterion.d}")
    return np.maximum(np.einsum("ij,jk,ik->i", scaled, criterion.a_matrix, scaled), 0.0)


# -- rules for the number of principal components ---------------------------------


def choose_k_kaiser(design: DesignModel) -> int:
    """Components whose eigenvalue exceeds the average, floored at 1."""
    lam = design.lam
    return max(int(np.sum(lam > lam.mean())), 1)


def choose_k_variance_explained(design: DesignModel, frac: float) -> int:
    """Smallest k whose top-k eigenvalues explain at least ``frac`` of the total."""
    if not 0.0 < frac <= 1.0:
        raise InputError(f"frac must be in (0, 1], got {frac}")
    share = np.cumsum(design.lam) / np.sum(design.lam)
    return int(np.searchsorted(share, frac - 1e-12) + 1)


def _p_dim(d: int) -> float:
    """Scaling constant of the small-alpha reduction-factor approximation."""
    from scipy.special import gammaln

    log_ball = np.log(2.0) + (d / 2.0) * np.log(np.pi) - np.log(d) - gammaln(d / 2.0)
    return (2.0 * np.pi / (d + 2.0)) * np.exp(-(2.0 / d) * log_ball)


def _mahalanobis_nu(j: int, alpha: float, method: str, draws: int, seed: int) -> float:
    """Common reduction factor for a j-component Mahalanobis acceptance rule."""
    if method == "approx":
        return min(_p_dim(j) * alpha ** (2.0 / j), 1.0)
    if method == "exact":
        a_j = stats.chi2.ppf(alpha, df=j)
        return stats.chi2.cdf(a_j, df=j + 2) / stats.chi2.cdf(a_j, df=j)
    if method == "mc":
        rng = substream(seed, STREAM_NU, j)
        z2 = rng.standard_normal((draws, j)) ** 2
        totals = z2.sum(axis=1)
        a_j = np.quantile(totals, alpha)
        accepted = z2[totals <= a_j]
        if accepted.shape[0] < 100:
            raise NuEstimationFailed(f"only {accepted.shape[0]} accepted draws for k={j}")
        return float(accepted.mean())
    raise InputError(f"unknown nu method {method!r}")


def choose_k_weighted_eigenvalue(
    design: DesignModel,
    alpha: float,
    beta_z: np.ndarray | None = None,
    nu_method: str = "approx",
    draws: int = 200_000,
    seed: int = 0,
) -> int:
    """Pick k by weighing top-component reduction gains against dropped-component losses.

    The candidate objective at j is
        sum_{i<=j} w_i lam_i (nu_i(d) - nu_i(j)) - sum_{i>j} w_i lam_i (1 - nu_i(d))
    with weights w_i = beta_z_i^2 when outcome information is supplied and 1
    otherwise.  The acceptance rule on the top-j components is Mahalanobis,
    so nu_i(j) is a single factor per j; ties break to the smaller k.
    """
    d = design.d
    if d == 1:
        return 1
    lam = design.lam
    if beta_z is not None:
        beta_z = np.asarray(beta_z, dtype=float)
        if beta_z.shape != (d,):
            raise DimensionMismatch(f"beta_z has shape {beta_z.shape}, expected ({d},)")
        w = beta_z ** 2
    else:
        w = np.ones(d)

    nu_full = _mahalanobis_nu(d, alpha, nu_method, draws, seed)
    loss_tail = np.concatenate([np.cumsum((w * lam * (1.0 - nu_full))[::-1])[::-1][1:], [0.0]])
    best_j, best_val = 1, -np.inf
    for j in range(1, d + 1):
        nu_j = nu_full if j == d else _mahalanobis_nu(j, alpha, nu_method, draws, seed)
        gain = float(np.sum(w[:j] * lam[:j]) * (nu_full - nu_j))
        val = gain - loss_tail[j - 1]
        if val > best_val + 1e-15:
            best_j, best_val = j, val
    return best_j
