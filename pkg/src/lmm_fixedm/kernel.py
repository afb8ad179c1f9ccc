"""Rank-one representation of the per-cluster matrices H_i = I + sum_k theta_k z_k z_k'.

Columns are inserted one at a time with the Sherman-Morrison identity.
With u_s = H_{s-1}^{-1} z_(s) and d_s = 1 + theta_(s) z_(s)' u_s,

    H^{-1} = I - sum_s theta_(s) u_s u_s' / d_s,    log det H = sum_s log d_s.

All clusters are processed together on zero-padded ``(m, n_max)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, ModelSpec


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class KernelState:
    U: np.ndarray  # (m, n_max, q_gamma) update vectors u_{i,s}
    d: np.ndarray  # (m, q_gamma) denominators d_{i,s} >= 1
    theta: np.ndarray  # (q_gamma,) insertion-ordered variance ratios
    sizes: np.ndarray  # (m,) cluster sizes n_i

    @property
    def weights(self) -> np.ndarray:
        """theta_(s) / d_{i,s}, shape (m, q_gamma)."""
        return self.theta[None, :] / self.d


def check_theta(theta, q_gamma: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != q_gamma:
        raise DimensionError(f"theta has length {theta.shape[0]}, model has {q_gamma} random effects")
    if not np.all(np.isfinite(theta)) or np.any(theta < 0):
        raise DomainError(f"theta must be finite and nonnegative, got {theta}")
    return theta


def build_from_columns(Z: np.ndarray, theta: np.ndarray, sizes: np.ndarray) -> KernelState:
    """Build the state from padded random-effect columns ``Z`` of shape (m, n_max, q)."""
    m, nmax, qg = Z.shape
    U = np.empty_like(Z)
    d = np.empty((m, qg))
    for s in range(qg):
        z = Z[:, :, s]
        u = z.copy()
        for t in range(s):
            coef = theta[t] * np.einsum("ij,ij->i", U[:, :, t], z) / d[:, t]
            u -= coef[:, None] * U[:, :, t]
        U[:, :, s] = u
        d[:, s] = 1.0 + theta[s] * np.einsum("ij,ij->i", z, u)
    return KernelState(U, d, theta.copy(), np.asarray(sizes))


def build_kernel(data: Dataset, spec: ModelSpec, theta) -> KernelState:
    """Factor H_i(gamma, theta) for every cluster, inserting gamma in increasing order."""
    spec.check(data)
    theta = check_theta(theta, spec.q_gamma)
    Z = data.padded.Z[:, :, spec.gamma0]
    return build_from_columns(Z, theta, data.sizes)


def apply_hinv_all(state: KernelState, B: np.ndarray) -> np.ndarray:
    """H_i^{-1} B_i for padded blocks ``B`` of shape (m, n_max) or (m, n_max, c)."""
    if state.theta.size == 0:
        return B.copy()
    if B.ndim == 2:
        proj = np.einsum("ins,in->is", state.U, B) * state.weights
        return B - np.einsum("ins,is->in", state.U, proj)
    proj = np.einsum("ins,inc->isc", state.U, B) * state.weights[:, :, None]
    return B - np.einsum("ins,isc->inc", state.U, proj)


def _cluster_vector(state: KernelState, i: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = int(state.sizes[i])
    if x.shape[0] != n:
        raise DimensionError(f"cluster {i} has {n} rows, got vector of length {x.shape[0]}")
    return x


def apply_hinv(state: KernelState, i: int, x) -> np.ndarray:
    """H_i^{-1} x for a single cluster (``i`` is the 0-based cluster position)."""
    x = _cluster_vector(state, i, x)
    n = int(state.sizes[i])
    U = state.U[i, :n]
    w = state.weights[i]
    if x.ndim == 1:
        return x - U @ (w * (U.T @ x))
    return x - U @ (w[:, None] * (U.T @ x))


def quad_form(state: KernelState, i: int, x, y) -> float:
    """x' H_i^{-1} y."""
    x = _cluster_vector(state, i, x)
    y = _cluster_vector(state, i, y)
    n = int(state.sizes[i])
    U = state.U[i, :n]
    return float(x @ y - np.sum(state.weights[i] * (U.T @ x) * (U.T @ y)))


def logdet_h(state: KernelState) -> float:
    """log det H = sum over clusters and inserted columns of log d_{i,s}."""
    return float(np.sum(np.log(state.d)))
