"""Pydantic request/response models for the service and the CLI client.

Responses embed a ``config`` block with every resolved parameter (plus a
digest of the input covariates) so a report is reproducible from its own
contents.  Execution-only knobs such as ``workers`` are deliberately left
out of the echo: they must not change results, and reports produced with
different worker counts must stay byte-identical.
"""

from __future__ import annotations

import hashlib
import warnings
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..criteria import (
    BalanceCriterion,
    CriterionKind,
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
)
from ..design import CovariateMatrix, DesignModel, read_covariates_csv, standardize
from ..errors import SchemaViolation


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CovariatesPayload(StrictModel):
    csv_text: str
    drop_zero_variance: bool = False

    def digest(self) -> str:
        return hashlib.sha256(self.csv_text.encode("utf-8")).hexdigest()[:16]

    def to_design(self, p: float) -> tuple[DesignModel, list[str]]:
        raw = read_covariates_csv(self.csv_text)
        dropped: list[str] = []
        if self.drop_zero_variance:
            sds = raw.values.std(axis=0, ddof=1)
            keep = sds > 0.0
            if not np.all(keep):
                dropped = [raw.column_names[j] for j in np.nonzero(~keep)[0]]
                warnings.warn(f"dropping zero-variance columns: {dropped}", stacklevel=2)
                raw = CovariateMatrix(
                    values=raw.values[:, keep],
                    unit_ids=raw.unit_ids,
                    column_names=tuple(
                        name for name, k in zip(raw.column_names, keep) if k
                    ),
                )
        return standardize(raw, p), dropped


CriterionName = Literal[
    "mahalanobis", "euclidean", "squared_euclidean", "ridge",
    "weighted_euclidean", "pca", "oracle", "custom",
]


class CriterionSpec(StrictModel):
    method: CriterionName
    ridge_lambda: Optional[float] = None
    exponent: Optional[float] = None
    weights: Optional[list[float]] = None
    k: Optional[int] = None
    k_rule: Optional[Literal["kaiser", "variance_explained", "weighted_eigenvalue"]] = None
    variance_fraction: Optional[float] = None
    inner: Literal["mahalanobis", "euclidean", "squared_euclidean", "ridge"] = "mahalanobis"
    beta: Optional[list[float]] = None
    matrix: Optional[list[list[float]]] = None

    def _check_fields(self):
        allowed = {
            "mahalanobis": set(),
            "euclidean": set(),
            "squared_euclidean": {"exponent"},
            "ridge": {"ridge_lambda"},
            "weighted_euclidean": {"weights"},
            "pca": {"k", "k_rule", "variance_fraction", "inner", "ridge_lambda", "exponent"},
            "oracle": {"beta"},
            "custom": {"matrix"},
        }[self.method]
        for name in ("ridge_lambda", "exponent", "weights", "k", "k_rule",
                     "variance_fraction", "beta", "matrix"):
            if getattr(self, name) is not None and name not in allowed:
                raise SchemaViolation(
                    f"criterion {self.method!r} does not accept {name!r}"
                )

    def _inner_kind(self) -> CriterionKind:
        if self.inner == "mahalanobis":
            return Mahalanobis()
        if self.inner == "euclidean":
            return Euclidean()
        if self.inner == "squared_euclidean":
            return SquaredEuclidean(c=self.exponent if self.exponent is not None else 1.0)
        return Ridge(ridge_lambda=self.ridge_lambda if self.ridge_lambda is not None else 1.0)

    def resolve_k(self, design: DesignModel, alpha: float, seed: int) -> int:
        if self.k is not None and self.k_rule is not None:
            raise SchemaViolation("give either k or k_rule, not both")
        if self.k is not None:
            return self.k
        rule = self.k_rule or "kaiser"
        if rule == "kaiser":
            return choose_k_kaiser(design)
        if rule == "variance_explained":
            if self.variance_fraction is None:
                raise SchemaViolation("variance_explained rule needs variance_fraction")
            return choose_k_variance_explained(design, self.variance_fraction)
        return choose_k_weighted_eigenvalue(design, alpha, seed=seed)

    def to_kind(self, design: DesignModel, alpha: float, seed: int) -> CriterionKind:
        self._check_fields()
        if self.method == "mahalanobis":
            return Mahalanobis()
        if self.method == "euclidean":
            return Euclidean()
        if self.method == "squared_euclidean":
            return SquaredEuclidean(c=self.exponent if self.exponent is not None else 1.0)
        if self.method == "ridge":
            if self.ridge_lambda is None:
                raise SchemaViolation("ridge criterion needs ridge_lambda")
            return Ridge(ridge_lambda=self.ridge_lambda)
        if self.method == "weighted_euclidean":
            if not self.weights:
                raise SchemaViolation("weighted_euclidean criterion needs weights")
            return WeightedEuclidean(weights=tuple(self.weights))
        if self.method == "pca":
            return PCARestricted(
                k=self.resolve_k(design, alpha, seed), inner=self._inner_kind()
            )
        if self.method == "oracle":
            if not self.beta:
                raise SchemaViolation("oracle criterion needs beta")
            return Oracle(beta=tuple(self.beta))
        if not self.matrix:
            raise SchemaViolation("custom criterion needs matrix")
        return Custom(a_matrix=np.asarray(self.matrix, dtype=float))

    def build(self, design: DesignModel, alpha: float, seed: int) -> BalanceCriterion:
        return build_criterion(self.to_kind(design, alpha, seed), design)

    def echo(self, criterion: BalanceCriterion) -> dict:
        out = self.model_dump(exclude_none=True)
        if criterion.pca_k is not None:
            out["k"] = criterion.pca_k
        return out


# -- calibrate ---------------------------------------------------------------


class CalibrateRequest(StrictModel):
    covariates: CovariatesPayload
    p: float = 0.5
    criterion: CriterionSpec
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    method: Literal["mc", "gamma", "exact"] = "mc"
    draws: Optional[int] = None
    seed: int = 0
    workers: int = 1


class CalibrateResponse(StrictModel):
    a: float
    alpha_target: float
    alpha_achieved: float
    se: float
    method: str
    config: dict


# -- assign ---------------------------------------------------------------------


class AssignRequest(StrictModel):
    covariates: CovariatesPayload
    p: float = 0.5
    criterion: CriterionSpec
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    calibration: Literal["mc", "gamma", "exact", "auto"] = "auto"
    draws: Optional[int] = None
    max_draws: Optional[int] = None
    seed: int = 0
    workers: int = 1


class AssignResponse(StrictModel):
    unit_ids: list[str]
    w: list[int]
    draws_used: int
    q_value: float
    a: float
    config: dict


# -- diagnose ----------------------------------------------------------------------


class DiagnoseRequest(StrictModel):
    covariates: CovariatesPayload
    p: float = 0.5
    criterion: CriterionSpec
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    calibration: Literal["mc", "gamma", "exact", "auto"] = "auto"
    draws: Optional[int] = None
    nu_draws: Optional[int] = None
    beta: Optional[list[float]] = None
    r_squared: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    seed: int = 0
    workers: int = 1


class DiagnoseResponse(StrictModel):
    a: float
    eta: list[float]
    nu_mc: list[float]
    nu_mc_se: list[float]
    accepted: int
    nu_approx: Optional[list[float]]
    nu_approx_note: Optional[str]
    frobenius_complete: float
    frobenius_rerandomized: float
    total_variance_reduction: float
    delta_variance: Optional[float]
    oracle_nu_star: Optional[float]
    oracle_percent_reduction: Optional[float]
    config: dict


# -- infer ----------------------------------------------------------------------------


class InferRequest(StrictModel):
    covariates: CovariatesPayload
    p: float = 0.5
    criterion: CriterionSpec
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    calibration: Literal["mc", "gamma", "exact", "auto"] = "auto"
    draws: Optional[int] = None
    assignment_csv: str
    outcomes_csv: str
    method: Literal["randomization", "asymptotic"] = "randomization"
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    m: int = Field(default=2000, ge=1)
    mc_draws: int = Field(default=20_000, ge=100)
    tau0: float = 0.0
    seed: int = 0
    workers: int = 1


class InferResponse(StrictModel):
    tau_hat: float
    method: str
    level: float
    p_value: Optional[float]
    ci_lo: float
    ci_hi: float
    conservative: bool
    config: dict


# -- simulate -----------------------------------------------------------------------------


class SimulateRequest(StrictModel):
    d: int = Field(ge=1)
    gamma_conc: float = Field(gt=0.0)
    n: int = Field(ge=4)
    p: float = Field(default=0.5, gt=0.0, lt=1.0)
    tau: float = 1.0
    scenario: Literal["bottom_weighted", "uniform", "top_weighted"]
    alpha: float = Field(default=0.01, gt=0.0, lt=1.0)
    replications: int = Field(ge=1)
    methods: list[str]
    seed: int = 0
    calibration: Literal["auto", "mc", "gamma"] = "auto"
    calibration_draws: int = 100_000
    workers: int = 1


class SimulateRow(StrictModel):
    d: int
    gamma: float
    scenario: str
    method: str
    sd_ratio: float
    mc_se: float
    replications: int
    seed: int


class SimulateResponse(StrictModel):
    rows: list[SimulateRow]
    config: dict


class ErrorBody(StrictModel):
    kind: str
    message: str
    exit_code: int
