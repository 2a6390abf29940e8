"""Post-experiment estimation and uncertainty.

Two routes for the average treatment effect after a rerandomized
experiment:

* randomization test of the sharp null Y_i(1) = Y_i(0) + tau0, with a
  confidence interval by inversion over tau0 (finite-population valid), and
* quantiles of the asymptotic conditional law eps + beta' xi given
  Q_A(xi) <= a, with plug-in moment estimates (conservative because the
  treatment-effect heterogeneity term is inestimable and dropped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import Assignment, batch_accepted
from .criteria import BalanceCriterion
from .design import DesignModel
from .diagnostics import OutcomeModel
from .errors import BracketNotFound, DegenerateOutcomes, InputError, LengthMismatch
from .rng import CHUNK, STREAM_INFER, substream
from .threshold import Threshold


@dataclass(frozen=True)
class InferenceResult:
    tau_hat: float
    method: str                    # "randomization" | "asymptotic"
    level: float | None = None
    p_value: float | None = None
    ci: tuple[float, float] | None = None
    replicates: int | None = None
    seed: int | None = None
    conservative: bool = False


def _w_array(w) -> np.ndarray:
    if isinstance(w, Assignment):
        return np.asarray(w.w, dtype=float)
    return np.asarray(w, dtype=float)


def infer(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    w_obs,
    y_obs: np.ndarray,
    method: str = "randomization",
    level: float = 0.95,
    m: int = 2000,
    draws: int = 20_000,
    tau0: float = 0.0,
    seed: int = 0,
    workers: int = 1,
) -> InferenceResult:
    """One-call post-experiment analysis packaging the chosen route's outputs."""
    from .rng import STREAM_BATCH, substream

    tau_hat = diff_in_means(w_obs, y_obs)
    if method == "randomization":
        p_value = randomization_test(design, criterion, threshold, w_obs, y_obs,
                                     tau0, m, substream(seed, STREAM_BATCH, 0),
                                     workers=workers)
        ci = randomization_ci(design, criterion, threshold, w_obs, y_obs, level,
                              m, substream(seed, STREAM_BATCH, 1), workers=workers)
        return InferenceResult(tau_hat=tau_hat, method=method, level=level,
                               p_value=p_value, ci=ci, replicates=m, seed=seed)
    if method == "asymptotic":
        ci = asymptotic_ci(design, criterion, threshold, w_obs, y_obs, level,
                           draws, seed=seed, workers=workers)
        return InferenceResult(tau_hat=tau_hat, method=method, level=level,
                               p_value=None, ci=ci, replicates=draws, seed=seed,
                               conservative=True)
    raise InputError(f"unknown inference method {method!r}")


def diff_in_means(w, y: np.ndarray) -> float:
    """Mean outcome under treatment minus mean outcome under control."""
    wf = _w_array(w)
    y = np.asarray(y, dtype=float)
    if wf.shape != y.shape:
        raise LengthMismatch(f"assignment {wf.shape} vs outcomes {y.shape}")
    n1 = wf.sum()
    n0 = len(wf) - n1
    if n1 == 0 or n0 == 0:
        raise InputError("both arms must be non-empty")
    return float(y @ wf / n1 - y @ (1.0 - wf) / n0)


def randomization_test(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    w_obs,
    y_obs: np.ndarray,
    tau0: float,
    m: int,
    rng: np.random.Generator,
    max_draws: int | None = None,
    workers: int = 1,
) -> float:
    """p-value for the sharp null of a constant additive effect tau0.

    Reference assignments are drawn by rerandomizing with the same criterion
    and threshold as the experiment; ties on |t| count as exceedances.
    """
    wf = _w_array(w_obs)
    y_obs = np.asarray(y_obs, dtype=float)
    y0_imputed = y_obs - tau0 * wf
    t_obs = diff_in_means(wf, y_obs) - tau0
    replicates = batch_accepted(design, criterion, threshold, m, rng,
                                max_draws=max_draws, workers=workers)
    exceed = 0
    for rep in replicates:
        w_m = np.asarray(rep.assignment.w, dtype=float)
        t_m = diff_in_means(w_m, y0_imputed + tau0 * w_m) - tau0
        if abs(t_m) >= abs(t_obs):
            exceed += 1
    return (1 + exceed) / (m + 1)


def _neyman_se(wf: np.ndarray, y: np.ndarray) -> float:
    y1 = y[wf == 1]
    y0 = y[wf == 0]
    v1 = float(np.var(y1, ddof=1)) if len(y1) > 1 else 0.0
    v0 = float(np.var(y0, ddof=1)) if len(y0) > 1 else 0.0
    return float(np.sqrt(v1 / max(len(y1), 1) + v0 / max(len(y0), 1)))


def randomization_ci(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    w_obs,
    y_obs: np.ndarray,
    level: float,
    m: int,
    rng: np.random.Generator,
    max_draws: int | None = None,
    workers: int = 1,
    grid_half_width: float = 20.0,
) -> tuple[float, float]:
    """Confidence interval by inverting the sharp-null randomization test.

    One accepted batch is reused for every tau0 (common random numbers),
    under which each replicate statistic is linear in tau0 and the p-value
    curve can be scanned cheaply.  Endpoints are located by bisection from a
    grid stepped by the Neyman standard error.
    """
    if not 0.0 < level < 1.0:
        raise InputError(f"level must be in (0, 1), got {level}")
    wf = _w_array(w_obs)
    y_obs = np.asarray(y_obs, dtype=float)
    tau_hat = diff_in_means(wf, y_obs)
    replicates = batch_accepted(design, criterion, threshold, m, rng,
                                max_draws=max_draws, workers=workers)
    ws = np.array([rep.assignment.w for rep in replicates], dtype=float)
    # With Y0 imputed as y - tau0 w_obs, replicate m's centered statistic is
    # u_m - tau0 v_m; the observed centered statistic is tau_hat - tau0.
    n1, n0 = design.n1, design.n0
    u = ws @ y_obs / n1 - (1.0 - ws) @ y_obs / n0
    v = ws @ wf / n1 - (1.0 - ws) @ wf / n0

    def p_at(tau0: float) -> float:
        t_obs = tau_hat - tau0
        return (1 + int(np.sum(np.abs(u - tau0 * v) >= abs(t_obs)))) / (m + 1)

    thr = 1.0 - level
    se = _neyman_se(wf, y_obs)
    if se == 0.0:
        se = max(abs(tau_hat), 1.0) * 1e-3

    def endpoint(direction: int) -> float:
        inside = tau_hat
        step = 1
        while step <= grid_half_width:
            candidate = tau_hat + direction * step * se
            if p_at(candidate) <= thr:
                lo_b, hi_b = inside, candidate
                for _ in range(60):
                    mid = 0.5 * (lo_b + hi_b)
                    if p_at(mid) > thr:
                        lo_b = mid
                    else:
                        hi_b = mid
                return 0.5 * (lo_b + hi_b)
            inside = candidate
            step += 1
        raise BracketNotFound(
            f"p-value stayed above {thr} out to {grid_half_width} standard errors"
        )

    return endpoint(-1), endpoint(+1)


def estimate_outcome_model(
    design: DesignModel, w_obs, y_obs: np.ndarray
) -> OutcomeModel:
    """Plug-in moments of the outcome projection from one realized experiment.

    Arm-wise variances and outcome-covariate covariances are pooled with
    weights 1/p and 1/(1-p); the treatment-effect variance term is not
    estimable and is set to zero, which inflates v_tautau (conservative).
    Collinear covariates fall back to a small ridge on sigma's diagonal.
    """
    wf = _w_array(w_obs)
    y = np.asarray(y_obs, dtype=float)
    if wf.shape != y.shape or len(y) != design.n:
        raise LengthMismatch("assignment/outcome lengths must match the design")
    p = design.p
    treated = wf == 1
    y1, y0 = y[treated], y[~treated]
    if len(y1) < 2 or len(y0) < 2:
        raise InputError("need at least two units per arm")
    s2_1 = float(np.var(y1, ddof=1))
    s2_0 = float(np.var(y0, ddof=1))
    if s2_1 == 0.0 and s2_0 == 0.0:
        raise DegenerateOutcomes("outcomes are constant in both arms")
    v_tautau = s2_1 / p + s2_0 / (1.0 - p)

    x1 = design.x_std[treated]
    x0 = design.x_std[~treated]
    cov1 = (x1 - x1.mean(axis=0)).T @ (y1 - y1.mean()) / (len(y1) - 1)
    cov0 = (x0 - x0.mean(axis=0)).T @ (y0 - y0.mean()) / (len(y0) - 1)
    v_xtau = cov1 / p + cov0 / (1.0 - p)

    lam = design.lam
    if design.rank() < design.d:
        lam = lam + 1e-8 * max(lam[0], 1.0)
    beta = design.gamma @ ((design.gamma.T @ v_xtau) / lam)
    r2 = float(v_xtau @ beta) / v_tautau
    r2 = min(max(r2, 0.0), 1.0)
    return OutcomeModel(r_squared=r2, v_tautau=v_tautau, beta=beta)


def asymptotic_ci(
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    w_obs,
    y_obs: np.ndarray,
    level: float,
    draws: int,
    seed: int = 0,
    workers: int = 1,
) -> tuple[float, float]:
    """Interval from Monte Carlo quantiles of eps + beta' xi given Q_A(xi) <= a.

    ``draws`` is the target number of accepted conditional draws; the raw
    sample size is scaled by 1/alpha.  The resulting interval is conservative
    under treatment-effect heterogeneity.
    """
    if not 0.0 < level < 1.0:
        raise InputError(f"level must be in (0, 1), got {level}")
    wf = _w_array(w_obs)
    y = np.asarray(y_obs, dtype=float)
    tau_hat = diff_in_means(wf, y)
    outcome = estimate_outcome_model(design, wf, y)
    beta = outcome.beta_x(design)
    eps_sd = float(np.sqrt(outcome.v_tautau * (1.0 - outcome.r_squared)))

    # xi | Q_A(xi) <= a is sampled as sigma^(1/2) Omega Zacc with the
    # acceptance decided on sum eta_j Z_j^2; only beta' xi is needed.
    coef = (design.sigma_half @ criterion.omega).T @ beta
    eta = criterion.eta
    raw = int(np.ceil(draws / max(threshold.alpha_target, 1e-6) * 1.25))

    def one_chunk(job):
        idx, (lo, hi) = job
        rng = substream(seed, STREAM_INFER, idx)
        z = rng.standard_normal((hi - lo, design.d))
        keep = (z * z) @ eta <= threshold.a
        zk = z[keep]
        eps = rng.standard_normal(zk.shape[0]) * eps_sd
        return eps + zk @ coef

    bounds = [(lo, min(lo + CHUNK, raw)) for lo in range(0, raw, CHUNK)]
    jobs = list(enumerate(bounds))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one_chunk, jobs))
    else:
        samples = [one_chunk(job) for job in jobs]
    t = np.concatenate(samples)
    if t.size == 0:
        raise DegenerateOutcomes("no accepted conditional draws; threshold too small")
    tail = (1.0 - level) / 2.0
    q_lo, q_hi = np.quantile(t, [tail, 1.0 - tail])
    root_n = np.sqrt(design.n)
    return float(tau_hat - q_hi / root_n), float(tau_hat - q_lo / root_n)
