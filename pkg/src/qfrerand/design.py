"""Covariate ingestion, standardization, and the design spectral model.

``DesignModel`` packages everything downstream formulas consume: the
standardized covariate matrix, the mean-difference covariance
``sigma = SampleCov(x_std) / (p (1 - p))``, its eigendecomposition
``(lam, gamma)``, and the SVD right factor of ``x_std``.  It is immutable
after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import (
    GroupCountMismatch,
    InputError,
    LengthMismatch,
    NonIntegerGroupSize,
    ZeroVarianceColumn,
)

_GROUP_SIZE_TOL = 1e-9


@dataclass(frozen=True)
class CovariateMatrix:
    """Raw n x d covariates with unit and column labels."""

    values: np.ndarray
    unit_ids: tuple[str, ...]
    column_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise InputError("covariate values must be a 2-d array")
        n, d = values.shape
        if n < 2 or d < 1:
            raise InputError(f"need n >= 2 units and d >= 1 covariates, got {n} x {d}")
        if not np.all(np.isfinite(values)):
            raise InputError("covariates contain non-finite entries")
        if len(self.unit_ids) != n:
            raise LengthMismatch(f"{len(self.unit_ids)} unit ids for {n} rows")
        if len(self.column_names) != d:
            raise LengthMismatch(f"{len(self.column_names)} names for {d} columns")
        if len(set(self.unit_ids)) != n:
            raise InputError("unit ids must be unique")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DesignModel:
    """Standardized covariates plus the spectral machinery built on them."""

    x_std: np.ndarray
    unit_ids: tuple[str, ...]
    column_names: tuple[str, ...]
    n1: int
    n0: int
    p: float
    sigma: np.ndarray        # d x d, SampleCov(x_std) / (p (1-p))
    lam: np.ndarray          # eigenvalues of sigma, descending
    gamma: np.ndarray        # orthogonal eigenvectors of sigma (columns)
    svd_v: np.ndarray        # right singular vectors of x_std (columns)
    svd_d: np.ndarray        # singular values of x_std, descending

    @property
    def n(self) -> int:
        return self.x_std.shape[0]

    @property
    def d(self) -> int:
        return self.x_std.shape[1]

    @property
    def sigma_half(self) -> np.ndarray:
        """Symmetric PSD square root of sigma."""
        root = self.gamma @ np.diag(np.sqrt(np.clip(self.lam, 0.0, None))) @ self.gamma.T
        return (root + root.T) / 2.0

    def rank(self, rel_tol: float = 1e-10) -> int:
        """Number of sigma eigenvalues above ``rel_tol * lam[0]``."""
        if self.lam[0] <= 0:
            return 0
        return int(np.sum(self.lam > rel_tol * self.lam[0]))


@dataclass(frozen=True)
class MeanDifference:
    """Covariate mean differences between treated and control groups."""

    tau_x: np.ndarray
    scaled: np.ndarray   # sqrt(n) * tau_x

    def __post_init__(self):
        object.__setattr__(self, "tau_x", np.asarray(self.tau_x, dtype=float))
        object.__setattr__(self, "scaled", np.asarray(self.scaled, dtype=float))


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Makes eigen/singular vectors reproducible across runs and BLAS builds.
    """
    out = vectors.copy()
    idx = np.argmax(np.abs(out), axis=0)
    flips = out[idx, np.arange(out.shape[1])] < 0
    out[:, flips] *= -1.0
    return out


def standardize(raw: CovariateMatrix, p: float) -> DesignModel:
    """Center/scale columns to mean 0, sample variance 1, and build the model.

    ``p`` is the treated proportion; ``n * p`` must be a whole number with at
    least one unit in each arm.  Columns with zero sample variance are an
    error (standardization is undefined for them; drop them upstream).
    """
    n, d = raw.n, raw.d
    if not 0.0 < p < 1.0:
        raise InputError(f"p must be in (0, 1), got {p}")
    n1_float = n * p
    n1 = round(n1_float)
    if abs(n1_float - n1) > _GROUP_SIZE_TOL * max(1.0, n):
        raise NonIntegerGroupSize(f"n * p = {n1_float} is not a whole number")
    if n1 < 1 or n - n1 < 1:
        raise NonIntegerGroupSize(f"group sizes {n1}/{n - n1} must both be >= 1")

    means = raw.values.mean(axis=0)
    sds = raw.values.std(axis=0, ddof=1)
    for j, sd in enumerate(sds):
        if sd == 0.0:
            raise ZeroVarianceColumn(raw.column_names[j])
    x_std = (raw.values - means) / sds

    pq = p * (1.0 - p)
    sigma = (x_std.T @ x_std) / (n - 1) / pq
    sigma = (sigma + sigma.T) / 2.0

    eigvals, eigvecs = np.linalg.eigh(sigma)
    order = np.argsort(eigvals)[::-1]
    lam = np.clip(eigvals[order], 0.0, None)
    gamma = fix_signs(eigvecs[:, order])

    _, svals, vt = np.linalg.svd(x_std, full_matrices=False)
    svd_v = fix_signs(vt.T)
    svd_d = svals

    return DesignModel(
        x_std=x_std,
        unit_ids=raw.unit_ids,
        column_names=raw.column_names,
        n1=n1,
        n0=n - n1,
        p=p,
        sigma=sigma,
        lam=lam,
        gamma=gamma,
        svd_v=svd_v,
        svd_d=svd_d,
    )


def mean_difference(design: DesignModel, w: np.ndarray) -> MeanDifference:
    """tau_x = mean(X | w=1) - mean(X | w=0) on the standardized covariates."""
    w = np.asarray(w)
    n = design.n
    if w.shape != (n,):
        raise LengthMismatch(f"assignment length {w.shape} != ({n},)")
    ones = int(np.sum(w))
    if ones != design.n1:
        raise GroupCountMismatch(f"{ones} treated units, design expects {design.n1}")
    wf = w.astype(float)
    tau_x = design.x_std.T @ wf / design.n1 - design.x_std.T @ (1.0 - wf) / design.n0
    return MeanDifference(tau_x=tau_x, scaled=np.sqrt(n) * tau_x)


def read_covariates_csv(text: str) -> CovariateMatrix:
    """Parse the covariate CSV: header row, first column unit id, rest numeric."""
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if len(rows) < 3:
        raise InputError("covariate CSV needs a header and at least two data rows")
    header = rows[0]
    if len(header) < 2:
        raise InputError("covariate CSV needs a unit-id column and at least one covariate")
    names = tuple(name.strip() for name in header[1:])
    ids = []
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        try:
            data.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise InputError(f"line {lineno}: non-numeric covariate value ({exc})") from exc
    return CovariateMatrix(values=np.array(data), unit_ids=tuple(ids), column_names=names)


def load_covariates(path: str) -> CovariateMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        return read_covariates_csv(fh.read())
