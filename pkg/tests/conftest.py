import numpy as np
import pytest

from qfrerand.design import CovariateMatrix, DesignModel, standardize


def gaussian_design(n=120, d=3, seed=0, p=0.5, correlated=True) -> DesignModel:
    """Design built from Gaussian covariates with mild correlation."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    if correlated and d > 1:
        mix = np.eye(d) + 0.3 * rng.standard_normal((d, d)) / np.sqrt(d)
        x = x @ mix
    return standardize(make_matrix(x), p)


def make_matrix(values: np.ndarray) -> CovariateMatrix:
    n, d = values.shape
    return CovariateMatrix(
        values=values,
        unit_ids=tuple(f"u{i}" for i in range(n)),
        column_names=tuple(f"x{j}" for j in range(d)),
    )


def design_with_correlation(corr: np.ndarray, n: int, seed=0, p=0.5) -> DesignModel:
    """Design whose sample correlation matrix equals ``corr`` exactly.

    Columns are built as root(n-1) * H @ corr^(1/2) with H orthonormal and
    orthogonal to the all-ones vector, so sample means are 0 and the sample
    covariance is exactly ``corr``.
    """
    corr = np.asarray(corr, dtype=float)
    d = corr.shape[0]
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    g -= g.mean(axis=0)
    h, _ = np.linalg.qr(g)
    vals, vecs = np.linalg.eigh(corr)
    root = vecs @ np.diag(np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    x = np.sqrt(n - 1) * h @ root
    return standardize(make_matrix(x), p)


def covariates_csv(values: np.ndarray) -> str:
    n, d = values.shape
    header = "id," + ",".join(f"x{j}" for j in range(d))
    lines = [header]
    for i in range(n):
        lines.append(f"u{i}," + ",".join(repr(float(v)) for v in values[i]))
    return "\n".join(lines) + "\n"


def check_design_invariants(design: DesignModel):
    n, d = design.n, design.d
    pq = design.p * (1.0 - design.p)
    assert np.all(np.abs(design.x_std.mean(axis=0)) <= 1e-10)
    assert np.all(np.abs(design.x_std.var(axis=0, ddof=1) - 1.0) <= 1e-8)
    sample_cov = design.x_std.T @ design.x_std / (n - 1)
    assert np.max(np.abs(design.sigma - sample_cov / pq)) <= 1e-10
    assert np.max(np.abs(design.gamma.T @ design.gamma - np.eye(d))) <= 1e-10
    recon = design.gamma @ np.diag(design.lam) @ design.gamma.T
    assert np.max(np.abs(recon - design.sigma)) <= 1e-8
    assert np.all(np.diff(design.lam) <= 1e-12)
    assert np.all(design.lam >= 0.0)
    assert abs(np.trace(design.sigma) * pq - d) <= 1e-8
    lam_from_svd = design.svd_d ** 2 / ((n - 1) * pq)
    nonzero = design.lam > 1e-12 * max(design.lam[0], 1.0)
    assert np.allclose(lam_from_svd[nonzero], design.lam[nonzero], rtol=1e-6)


@pytest.fixture
def design3() -> DesignModel:
    return gaussian_design(n=150, d=3, seed=42)
