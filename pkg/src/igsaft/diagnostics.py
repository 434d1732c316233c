"""Model diagnosis: the heteroskedasticity-robust relevance test for the
interaction block of the exposure regression, and the overidentification
test based on the scaled GEL objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from .data import Dataset
from .errors import DomainError, EstimationError, IllPosedError
from .gel import GelFit
from .interactions import MomentSpec, eval_centered_matrix


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: tuple[int, int] | int
    p_value: float
    kind: str

    def to_dict(self) -> dict:
        df = list(self.df) if isinstance(self.df, tuple) else self.df
        return {"statistic": self.statistic, "df": df,
                "p_value": self.p_value, "kind": self.kind}


def relevance_f_test(dataset: Dataset, spec: MomentSpec, hc: str = "hc0") -> TestResult:
    """Robust Wald test that every interaction coefficient in the exposure
    regression is zero; the statistic is referred to chi-square(m)."""
    if hc not in ("hc0", "hc3"):
        raise DomainError(f"unknown covariance variant {hc!r}")
    n, p, m = dataset.n, dataset.p, spec.m
    if n <= 1 + p + m:
        raise IllPosedError(f"need n > 1 + p + m = {1 + p + m}, got n = {n}")
    zeta = dataset.z.mean(axis=0)
    X = np.column_stack([np.ones(n), dataset.z,
                         eval_centered_matrix(dataset.z, zeta, spec)])
    XtX = X.T @ X
    try:
        c_low = linalg.cho_factor(XtX, check_finite=False)
    except linalg.LinAlgError:
        try:
            c_low = linalg.cho_factor(XtX + 1e-8 * np.eye(X.shape[1]), check_finite=False)
        except linalg.LinAlgError:
            raise EstimationError("relevance test design is singular") from None
    beta = linalg.cho_solve(c_low, X.T @ dataset.d, check_finite=False)
    e = dataset.d - X @ beta
    e2 = e ** 2
    if hc == "hc3":
        lever = np.einsum("ij,ij->i", X, linalg.cho_solve(c_low, X.T, check_finite=False).T)
        e2 = e2 / np.maximum(1.0 - lever, 1e-8) ** 2
    meat = (X * e2[:, None]).T @ X
    bread = linalg.cho_solve(c_low, np.eye(X.shape[1]), check_finite=False)
    V = bread @ meat @ bread
    sl = slice(1 + p, 1 + p + m)
    theta_i = beta[sl]
    V_ii = V[sl, sl]
    try:
        stat = float(theta_i @ linalg.solve(V_ii, theta_i, assume_a="pos"))
    except linalg.LinAlgError:
        stat = float(theta_i @ linalg.lstsq(V_ii, theta_i)[0])
    return TestResult(statistic=stat, df=(m, n - X.shape[1]),
                      p_value=float(chi2.sf(stat, m)), kind="relevance_F")


def overid_test(fit: GelFit, n: int, m: int) -> TestResult:
    """J-style test: 2n Q_hat(beta_hat) against chi-square(m - 1)."""
    if m < 2:
        raise DomainError("overidentification test undefined for m = 1 (just identified)")
    if not fit.converged:
        raise EstimationError("overidentification test requires a converged fit")
    stat = 2.0 * n * fit.q_hat
    return TestResult(statistic=float(stat), df=m - 1,
                      p_value=float(chi2.sf(stat, m - 1)), kind="overidentification")
