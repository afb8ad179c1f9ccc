"""Empirical BLUP and least-squares prediction of the random effects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, ModelSpec
from .optimize import MLFit, ols_residuals


class PredictionError(ValueError):
    pass


class MomentUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionResult:
    b_blup: list[np.ndarray]  # per cluster, length q(gamma)
    b_ls: list[np.ndarray]
    fitted: list[np.ndarray]  # Z_i(gamma) b_blup_i


def blup_given(data: Dataset, spec: ModelSpec, theta, beta) -> list[np.ndarray]:
    """b_i = D Z_i' H_i^{-1} (y_i - X_i beta) with D = diag(theta).

    Evaluated as D^{1/2} (I + D^{1/2} Z'Z D^{1/2})^{-1} D^{1/2} Z' r, which is
    the same quantity but stays accurate for very large theta.
    """
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    sq = np.sqrt(theta)
    out = []
    for c in data.clusters:
        X, Z = c.X[:, spec.alpha0], c.Z[:, spec.gamma0]
        r = c.y - X @ beta
        S = sq[:, None] * (Z.T @ Z) * sq[None, :]
        rhs = sq * (Z.T @ r)
        out.append(sq * np.linalg.solve(np.eye(len(theta)) + S, rhs))
    return out


def ls_predict(data: Dataset, spec: ModelSpec) -> list[np.ndarray]:
    """Per-cluster least squares (Z_i'Z_i)^{-1} Z_i'(y_i - X_i beta_OLS)."""
    spec.check(data)
    _, r = ols_residuals(data, spec)
    bounds = np.concatenate([[0], np.cumsum(data.sizes)])
    out = []
    for i, c in enumerate(data.clusters):
        Z = c.Z[:, spec.gamma0]
        if spec.q_gamma and np.linalg.matrix_rank(Z) < spec.q_gamma:
            raise PredictionError(f"cluster {c.id}: Z(gamma) is rank deficient")
        ri = r[bounds[i] : bounds[i + 1]]
        out.append(np.linalg.solve(Z.T @ Z, Z.T @ ri) if spec.q_gamma else np.zeros(0))
    return out


def blup(data: Dataset, spec: ModelSpec, fit: MLFit) -> PredictionResult:
    if fit.spec != spec:
        raise PredictionError(f"fit was computed for {fit.spec}, not {spec}")
    spec.check(data)
    b_hat = blup_given(data, spec, fit.theta_hat, fit.beta_hat)
    try:
        b_ls = ls_predict(data, spec)
    except PredictionError:
        b_ls = [np.full(spec.q_gamma, np.nan) for _ in data.clusters]
    fitted = [c.Z[:, spec.gamma0] @ b for c, b in zip(data.clusters, b_hat)]
    return PredictionResult(b_hat, b_ls, fitted)


def _check_example_design(data: Dataset):
    if data.p != 0 or data.q != 1:
        raise PredictionError(f"need a design with p=0 and q=1, got p={data.p}, q={data.q}")


def d_statistic(data: Dataset, b_true, sigma1_sq: float, v2: float) -> float:
    """Sum_i |Z_i(b_ls - b)|^2 - sum_i |Z_i(b_blup(sigma1_sq, v2) - b)|^2 for p=0, q=1."""
    _check_example_design(data)
    b_true = np.asarray(b_true, dtype=float).reshape(-1)
    if b_true.shape[0] != data.m:
        raise PredictionError(f"need one true effect per cluster ({data.m}), got {b_true.shape[0]}")
    theta = sigma1_sq / v2
    total = 0.0
    for c, b in zip(data.clusters, b_true):
        z = c.Z[:, 0]
        zz, zy = z @ z, z @ c.y
        b_ls = zy / zz
        b_hat = theta * zy / (1.0 + theta * zz)
        total += zz * ((b_ls - b) ** 2 - (b_hat - b) ** 2)
    return float(total)


def expected_gap(m: int, v0_sq: float, sigma1_sq: float) -> float:
    """Mean of the limiting efficiency gap, m(m-4) v0^4 / ((m-2) sigma1^2); needs m > 4."""
    if m <= 4:
        raise MomentUndefinedError(f"moments of the limiting gap do not exist for m <= 4 (got m={m})")
    return m * (m - 4) * v0_sq**2 / ((m - 2) * sigma1_sq)
