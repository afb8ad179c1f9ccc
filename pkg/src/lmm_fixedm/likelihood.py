"""Profile likelihood of the clustered mixed model.

For a candidate model (alpha, gamma) the negative twice log-likelihood with
beta replaced by its GLS estimate is

    N log(2 pi) + N log v2 + log det H(theta) + y' H^{-1} (I - M) y / v2,

and v2 is profiled out in closed form as y' H^{-1} (I - M) y / N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernel import DomainError, KernelState, apply_hinv_all, build_from_columns, check_theta, logdet_h
from .model import Dataset, ModelSpec

LOG_2PI = float(np.log(2.0 * np.pi))


class RankError(ValueError):
    """The fixed-effects Gram matrix X' H^{-1} X is singular."""


class DegenerateFitError(ValueError):
    """Zero residual: the profiled v2 would be 0 and log v2 diverges."""


@dataclass(frozen=True)
class LikelihoodEval:
    neg2loglik: float
    v2_profiled: float
    beta_hat: np.ndarray
    residual_quad: float
    logdet: float
    degenerate: bool = False


@dataclass(frozen=True)
class _Moments:
    XtHX: np.ndarray  # (p, p)
    XtHy: np.ndarray  # (p,)
    ytHy: float
    ZtHZ: np.ndarray  # (m, q) diagonal terms z_k' H^-1 z_k
    ZtHy: np.ndarray  # (m, q)
    ZtHX: np.ndarray  # (m, q, p)


class ProfileProblem:
    """Cached design for repeated likelihood evaluations of one (dataset, model) pair."""

    def __init__(self, data: Dataset, spec: ModelSpec):
        spec.check(data)
        self.data = data
        self.spec = spec
        pad = data.padded
        self.p = spec.p_alpha
        self.q = spec.q_gamma
        self.N = data.N
        self.Z = np.ascontiguousarray(pad.Z[:, :, spec.gamma0])
        self.cols = np.concatenate([pad.X[:, :, spec.alpha0], pad.y[:, :, None], self.Z], axis=2)
        y, _, _ = data.stacked()
        self.degenerate_floor = self.N * 1e-14 * float(np.var(y))

    def kernel(self, theta) -> KernelState:
        theta = check_theta(theta, self.q)
        return build_from_columns(self.Z, theta, self.data.sizes)

    def moments(self, state: KernelState) -> _Moments:
        p, q = self.p, self.q
        HB = apply_hinv_all(state, self.cols)
        X, Hy = self.cols[:, :, :p], HB[:, :, p]
        HX, HZ = HB[:, :, :p], HB[:, :, p + 1 :]
        Z = self.Z
        y = self.cols[:, :, p]
        return _Moments(
            XtHX=np.einsum("inj,ink->jk", X, HX),
            XtHy=np.einsum("inj,in->j", X, Hy),
            ytHy=float(np.einsum("in,in->", y, Hy)),
            ZtHZ=np.einsum("ink,ink->ik", Z, HZ),
            ZtHy=np.einsum("ink,in->ik", Z, Hy),
            ZtHX=np.einsum("ink,inj->ikj", Z, HX),
        )

    def beta(self, mom: _Moments) -> np.ndarray:
        if self.p == 0:
            return np.zeros(0)
        try:
            cf = linalg.cho_factor(mom.XtHX, lower=True, check_finite=False)
            if np.min(np.abs(np.diag(cf[0]))) ** 2 <= 1e-13 * np.max(np.diag(mom.XtHX)):
                raise linalg.LinAlgError("near-singular")
        except linalg.LinAlgError:
            raise RankError(f"X(alpha)' H^-1 X(alpha) is singular; offending columns {self._offending(mom)}") from None
        return linalg.cho_solve(cf, mom.XtHy, check_finite=False)

    def _offending(self, mom: _Moments) -> list[str]:
        scale = np.sqrt(np.maximum(np.diag(mom.XtHX), 1e-300))
        w, V = np.linalg.eigh(mom.XtHX / np.outer(scale, scale))
        vec = V[:, 0]
        return [f"x{self.spec.alpha[j]}" for j in np.flatnonzero(np.abs(vec) > 0.1)]

    def evaluate(self, theta, v2=None, gradient=False):
        """Return (LikelihoodEval, grad_theta or None).

        With ``v2=None`` the profiled v2 is used; otherwise the deviance is
        evaluated at the given v2 and the gradient is taken at that v2.
        """
        state = self.kernel(theta)
        mom = self.moments(state)
        beta = self.beta(mom)
        rq = mom.ytHy - float(mom.XtHy @ beta) if self.p else mom.ytHy
        ld = logdet_h(state)
        degenerate = rq <= self.degenerate_floor
        v2_prof = max(rq, 0.0) / self.N
        if v2 is None:
            if degenerate:
                ev = LikelihoodEval(np.inf, v2_prof, beta, rq, ld, True)
                return ev, None
            v2_use = v2_prof
        else:
            v2_use = float(v2)
            if not v2_use > 0:
                raise DomainError(f"v2 must be positive, got {v2}")
        val = self.N * LOG_2PI + self.N * np.log(v2_use) + ld + rq / v2_use
        ev = LikelihoodEval(float(val), v2_prof, beta, rq, ld, bool(degenerate))
        grad = None
        if gradient:
            # z' H^-1 (y - X beta) per cluster and random effect
            zr = mom.ZtHy - (mom.ZtHX @ beta if self.p else 0.0)
            grad = np.sum(mom.ZtHZ - zr**2 / v2_use, axis=0)
        return ev, grad


def gls_beta(data: Dataset, spec: ModelSpec, kernel: KernelState) -> np.ndarray:
    """(X' H^-1 X)^-1 X' H^-1 y for a kernel built on the same (data, spec)."""
    prob = ProfileProblem(data, spec)
    return prob.beta(prob.moments(kernel))


def profiled_v2(data: Dataset, spec: ModelSpec, kernel: KernelState) -> tuple[float, float]:
    """Return ``(v2, residual_quad)`` with v2 = y'H^-1(I - M)y / N.

    Raises DegenerateFitError when the residual quadratic form is numerically zero.
    """
    prob = ProfileProblem(data, spec)
    mom = prob.moments(kernel)
    beta = prob.beta(mom)
    rq = mom.ytHy - float(mom.XtHy @ beta) if prob.p else mom.ytHy
    if rq <= prob.degenerate_floor:
        raise DegenerateFitError(f"residual quadratic form {rq:.3g} is numerically zero")
    return rq / prob.N, rq


def neg2loglik(data: Dataset, spec: ModelSpec, theta, v2: float) -> float:
    if not v2 > 0:
        raise DomainError(f"v2 must be positive, got {v2}")
    ev, _ = ProfileProblem(data, spec).evaluate(theta, v2=v2)
    return ev.neg2loglik


def profile_objective(data: Dataset, spec: ModelSpec, theta) -> LikelihoodEval:
    """-2 log L at (theta, profiled v2). Degenerate data give ``neg2loglik = inf``."""
    ev, _ = ProfileProblem(data, spec).evaluate(theta)
    return ev


def grad_v2(data: Dataset, spec: ModelSpec, theta, v2: float) -> float:
    """Partial derivative of -2 log L with respect to v2."""
    if not v2 > 0:
        raise DomainError(f"v2 must be positive, got {v2}")
    ev, _ = ProfileProblem(data, spec).evaluate(theta, v2=v2)
    return data.N / v2 - ev.residual_quad / v2**2


def grad_theta(data: Dataset, spec: ModelSpec, theta, v2: float) -> np.ndarray:
    """Partial derivatives of -2 log L with respect to theta_k, k in gamma."""
    if not v2 > 0:
        raise DomainError(f"v2 must be positive, got {v2}")
    _, g = ProfileProblem(data, spec).evaluate(theta, v2=v2, gradient=True)
    return g
