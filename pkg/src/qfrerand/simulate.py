"""Simulation harness: eigenvalue spectra, synthetic experiments, SD-ratio tables.

A replication draws an eigenvalue spectrum from a scaled Dirichlet, rotates
it by a Haar orthogonal matrix, samples Gaussian covariates, re-standardizes
them, and builds potential outcomes from a scenario-specific projection onto
the principal components.  Each rerandomization method then contributes one
accepted assignment per replication; the comparison metric is the standard
deviation of the difference-in-means estimate across replications, relative
to complete randomization on the same datasets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np

from .assign import _assignment_batch, complete_randomization, default_max_draws
from .criteria import (
    BalanceCriterion,
    Euclidean,
    Mahalanobis,
    Oracle,
    PCARestricted,
    Ridge,
    SquaredEuclidean,
    build_criterion,
    choose_k_kaiser,
    choose_k_weighted_eigenvalue,
    qform_values,
)
from .design import CovariateMatrix, DesignModel, standardize
from .diagnostics import OutcomeModel
from .errors import InputError, MaxDrawsExceeded
from .inference import diff_in_means
from .rng import STREAM_SIM, derive_seed, substream
from .threshold import calibrate

SCENARIOS = ("bottom_weighted", "uniform", "top_weighted")

# Spectra below this floor (relative to the mean eigenvalue 1) are clipped
# before renormalization; near-exact zeros from sparse Dirichlet draws would
# otherwise make the sample covariance numerically singular.
_EIGENVALUE_FLOOR = 1e-6


@dataclass(frozen=True)
class SimulationConfig:
    d: int
    gamma_conc: float
    n: int
    p: float
    tau: float
    scenario: str
    alpha: float
    replications: int
    methods: tuple[str, ...]
    seed: int
    calibration: str = "auto"          # "auto" | "mc" | "gamma"
    calibration_draws: int = 100_000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InputError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.replications < 1:
            raise InputError("replications must be >= 1")
        if self.d < 1 or self.n <= self.d:
            raise InputError(f"need n > d >= 1, got n={self.n}, d={self.d}")
        if self.gamma_conc <= 0:
            raise InputError("gamma_conc must be positive")


@dataclass(frozen=True)
class SimulatedDataset:
    design: DesignModel
    y0: np.ndarray
    y1: np.ndarray
    outcome: OutcomeModel              # realized finite-sample projection
    scenario_beta_z: np.ndarray        # the projection used to generate outcomes


def sample_eigenvalues(d: int, gamma_conc: float, rng: np.random.Generator) -> np.ndarray:
    """d * Dirichlet(gamma 1_d), descending; sums to d exactly."""
    lam = rng.dirichlet(np.full(d, gamma_conc))
    lam = np.maximum(lam, _EIGENVALUE_FLOOR / d)
    lam = d * lam / lam.sum()
    return np.sort(lam)[::-1]


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian with sign-corrected R."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def scenario_beta_z(scenario: str, lam_x: np.ndarray) -> np.ndarray:
    """Outcome projection onto the PCs; lam_x are Cov(X) eigenvalues (sum d)."""
    if scenario == "bottom_weighted":
        return lam_x[::-1].copy()
    if scenario == "uniform":
        return np.ones_like(lam_x)
    if scenario == "top_weighted":
        return np.sqrt(lam_x)
    raise InputError(f"unknown scenario {scenario!r}")


def _finite_sample_outcome(design: DesignModel, y0: np.ndarray, y1: np.ndarray) -> OutcomeModel:
    n, p = design.n, design.p
    s2_1 = float(np.var(y1, ddof=1))
    s2_0 = float(np.var(y0, ddof=1))
    s2_tau = float(np.var(y1 - y0, ddof=1))
    v_tautau = s2_1 / p + s2_0 / (1.0 - p) - s2_tau
    x = design.x_std
    cov1 = x.T @ (y1 - y1.mean()) / (n - 1)
    cov0 = x.T @ (y0 - y0.mean()) / (n - 1)
    v_xtau = cov1 / p + cov0 / (1.0 - p)
    beta = design.gamma @ ((design.gamma.T @ v_xtau) / design.lam)
    r2 = min(max(float(v_xtau @ beta) / v_tautau, 0.0), 1.0)
    return OutcomeModel(r_squared=r2, v_tautau=v_tautau,
                        beta=beta, beta_z=design.svd_v.T @ beta)


def simulate_dataset(config: SimulationConfig, rng: np.random.Generator) -> SimulatedDataset:
    """One synthetic experiment: covariates, potential outcomes, true projections."""
    d, n = config.d, config.n
    lam_pop = sample_eigenvalues(d, config.gamma_conc, rng)
    rot = random_orthogonal(d, rng)
    scale = rot @ np.diag(np.sqrt(lam_pop)) @ rot.T
    x = rng.standard_normal((n, d)) @ scale
    raw = CovariateMatrix(
        values=x,
        unit_ids=tuple(f"u{i}" for i in range(n)),
        column_names=tuple(f"x{j}" for j in range(d)),
    )
    design = standardize(raw, config.p)
    lam_x = design.lam * config.p * (1.0 - config.p)   # Cov(X) scale, sums to d
    beta_z = scenario_beta_z(config.scenario, lam_x)
    pcs = design.x_std @ design.svd_v
    y0 = pcs @ beta_z + rng.standard_normal(n)
    y1 = y0 + config.tau
    outcome = _finite_sample_outcome(design, y0, y1)
    return SimulatedDataset(design=design, y0=y0, y1=y1,
                            outcome=outcome, scenario_beta_z=beta_z)


def resolve_method(name: str, dataset: SimulatedDataset, config: SimulationConfig) -> BalanceCriterion | None:
    """Map a method name to a criterion for this dataset; None = complete randomization."""
    design = dataset.design
    base, _, param = name.partition(":")
    if base == "complete":
        return None
    if base == "mahalanobis":
        kind = Mahalanobis()
    elif base == "euclidean":
        kind = Euclidean()
    elif base == "squared_euclidean":
        kind = SquaredEuclidean(c=float(param) if param else 1.0)
    elif base == "ridge":
        kind = Ridge(ridge_lambda=float(param) if param else 1.0)
    elif base == "pca_kaiser":
        kind = PCARestricted(k=choose_k_kaiser(design))
    elif base == "pca_weighted":
        k = choose_k_weighted_eigenvalue(design, config.alpha)
        kind = PCARestricted(k=k)
    elif base == "oracle":
        kind = Oracle(beta=tuple(dataset.outcome.beta))
    else:
        raise InputError(f"unknown method {name!r}")
    return build_criterion(kind, design)


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    sd_ratio: float
    mc_se: float
    d: int
    gamma_conc: float
    scenario: str
    alpha: float
    replications: int
    seed: int


def _jackknife_ratio_se(num: np.ndarray, den: np.ndarray) -> float:
    """Leave-one-out standard error of std(num)/std(den) over paired replications."""
    m = len(num)
    if m < 3:
        return float("nan")

    def loo_std(x):
        s1, s2 = x.sum(), (x ** 2).sum()
        mean_loo = (s1 - x) / (m - 1)
        var_loo = (s2 - x ** 2 - (m - 1) * mean_loo ** 2) / (m - 2)
        return np.sqrt(np.maximum(var_loo, 0.0))

    ratios = loo_std(num) / loo_std(den)
    center = ratios.mean()
    return float(np.sqrt((m - 1) / m * np.sum((ratios - center) ** 2)))


def run_comparison(config: SimulationConfig, workers: int = 1) -> list[ComparisonRow]:
    """SD of tau-hat under each method relative to complete randomization.

    One accepted assignment per method per replication dataset; thresholds
    are recalibrated on every dataset.  All rerandomized methods scan one
    shared candidate stream per dataset (each takes its first acceptable
    candidate, so marginal distributions are exact and the comparison is
    coupled).  Replications run on independent substreams, so results do not
    depend on the worker count.
    """
    methods = list(config.methods)
    if config.replications < 3:
        raise InputError("SD ratios need at least 3 replications")

    def one_rep(r: int) -> list[float]:
        rng = substream(config.seed, STREAM_SIM, r)
        dataset = simulate_dataset(config, rng)
        design = dataset.design
        n, n1, n0 = design.n, design.n1, design.n0
        w_cr = complete_randomization(n, n1, rng)
        y_obs = np.where(w_cr.w == 1, dataset.y1, dataset.y0)
        row: list[float | None] = [diff_in_means(w_cr, y_obs)] + [None] * len(methods)

        pending = {}
        for mi, name in enumerate(methods):
            criterion = resolve_method(name, dataset, config)
            if criterion is None:
                w = complete_randomization(n, n1, rng)
                y = np.where(w.w == 1, dataset.y1, dataset.y0)
                row[mi + 1] = diff_in_means(w, y)
            else:
                thr = calibrate(
                    criterion, config.alpha, method=config.calibration,
                    draws=config.calibration_draws,
                    seed=derive_seed(config.seed, STREAM_SIM, r, 1000 + mi),
                )
                pending[mi] = (criterion, thr.a)

        max_draws = default_max_draws(config.alpha)
        done = 0
        batch = min(max(16, ceil(3.0 / config.alpha)), 4096)
        root_n = sqrt(n)
        while pending and done < max_draws:
            size = min(batch, max_draws - done)
            ws = _assignment_batch(n, n1, size, rng)
            scaled = root_n * (ws @ design.x_std / n1 - (1 - ws) @ design.x_std / n0)
            for mi in list(pending):
                criterion, cutoff = pending[mi]
                hits = np.nonzero(qform_values(criterion, scaled) <= cutoff)[0]
                if hits.size:
                    w = ws[hits[0]]
                    y = np.where(w == 1, dataset.y1, dataset.y0)
                    row[mi + 1] = diff_in_means(w.astype(float), y)
                    del pending[mi]
            done += size
            batch = min(batch * 2, 4096)
        if pending:
            raise MaxDrawsExceeded(max_draws)
        return row

    reps = range(config.replications)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one_rep, reps))
    else:
        rows = [one_rep(r) for r in reps]
    table = np.asarray(rows)

    tau_cr = table[:, 0]
    sd_cr = float(np.std(tau_cr, ddof=1))
    out = []
    for mi, name in enumerate(methods):
        tau_m = table[:, mi + 1]
        ratio = float(np.std(tau_m, ddof=1)) / sd_cr
        se = _jackknife_ratio_se(tau_m, tau_cr)
        out.append(ComparisonRow(
            method=name, sd_ratio=ratio, mc_se=se, d=config.d,
            gamma_conc=config.gamma_conc, scenario=config.scenario,
            alpha=config.alpha, replications=config.replications, seed=config.seed,
        ))
    return out
