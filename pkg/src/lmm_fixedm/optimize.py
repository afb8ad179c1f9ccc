"""Maximum likelihood fit by projected BFGS over theta >= 0."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .likelihood import DegenerateFitError, ProfileProblem
from .model import Dataset, ModelSpec

THETA_CAP = 1e6


@dataclass(frozen=True)
class FitOptions:
    grad_tol: float = 1e-8  # KKT tolerance, multiplied by N
    step_tol: float = 1e-10
    max_iter: int = 500
    starts: Optional[Sequence[Sequence[float]]] = None  # None: zero vector and moment start

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.step_tol > 0 and self.max_iter > 0):
            raise ValueError("tolerances and max_iter must be positive")


@dataclass(frozen=True)
class MLFit:
    spec: ModelSpec
    theta_hat: np.ndarray
    v2_hat: float
    beta_hat: np.ndarray
    neg2loglik_min: float
    iterations: int
    converged: bool
    kkt_residual: float
    at_cap: bool = False
    history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def sigma2_hat(self) -> dict[int, float]:
        """Random-effect variances theta_k * v2 keyed by 1-based effect index."""
        return {k: float(t * self.v2_hat) for k, t in zip(self.spec.gamma, self.theta_hat)}

    @property
    def active_set(self) -> tuple[int, ...]:
        return tuple(k for k, t in zip(self.spec.gamma, self.theta_hat) if t == 0.0)


def _projected_gradient(x, g, upper=THETA_CAP):
    pg = g.copy()
    pg[(x <= 0) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


@dataclass
class _Run:
    x: np.ndarray
    f: float
    iterations: int
    kkt: float
    history: list


def projected_bfgs(fun, x0, gtol, step_tol=1e-10, max_iter=500, upper=THETA_CAP) -> _Run:
    """Minimize ``fun(x) -> (f, g)`` over the box [0, upper]^q.

    Quasi-Newton steps are taken in the free variables (those not held at a
    bound by the sign of their gradient), projected back onto the box, and
    accepted by Armijo backtracking along the projection arc.
    """
    x = np.clip(np.asarray(x0, dtype=float), 0.0, upper)
    q = x.size
    f, g = fun(x)
    history = [f]
    Hinv = None
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_gradient(x, g, upper)
        if np.max(np.abs(pg)) <= gtol:
            it -= 1
            break
        bound = ((x <= 0) & (g > 0)) | ((x >= upper) & (g < 0))
        free = ~bound
        if Hinv is None:
            scale = 1.0 / max(np.max(np.abs(pg)), 1e-12) * max(1.0, np.max(x))
            Hinv = np.eye(q) * scale
        d = np.zeros(q)
        d[free] = -Hinv[np.ix_(free, free)] @ g[free]
        if not g @ d < 0:
            Hinv = np.eye(q) * (1.0 / max(np.max(np.abs(pg)), 1e-12))
            d = -pg * Hinv[0, 0]

        t = 1.0
        accepted = False
        for _ in range(60):
            x_new = np.clip(x + t * d, 0.0, upper)
            step = x_new - x
            if np.max(np.abs(step)) <= step_tol * (1.0 + np.max(np.abs(x))):
                break
            f_new, g_new = fun(x_new)
            if f_new <= f + 1e-4 * (g @ step):
                accepted = True
                break
            # Changes below the resolution of f: fall back to a derivative test.
            if f_new <= f + 1e-12 * abs(f) and abs(g_new @ step) <= 0.9 * abs(g @ step):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.allclose(Hinv, np.eye(q) * Hinv[0, 0]):
                break
            Hinv = None
            continue

        s, yv = x_new - x, g_new - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if it == 1:
                Hinv = np.eye(q) * (sy / (yv @ yv))
            rho = 1.0 / sy
            V = np.eye(q) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        history.append(f)
    kkt = float(np.max(np.abs(_projected_gradient(x, g, upper)), initial=0.0))
    return _Run(x, f, it, kkt, history)


def ols_residuals(data: Dataset, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stacked OLS coefficients on X(alpha) and per-row residuals."""
    y, X, _ = data.stacked()
    Xa = X[:, spec.alpha0]
    if Xa.shape[1] == 0:
        return np.zeros(0), y.copy()
    beta, *_ = np.linalg.lstsq(Xa, y, rcond=None)
    return beta, y - Xa @ beta


def method_of_moments_start(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Cheap moment estimate of theta used as an optimizer start.

    Per cluster, (z_k' r)^2 / |z_k|^4 estimates b_k^2 + v2 / |z_k|^2 from the
    OLS residuals r. The noise variance v2 is taken from the within-cluster
    residuals after regressing each cluster's r on Z_i(gamma).
    """
    spec.check(data)
    qg = spec.q_gamma
    _, r = ols_residuals(data, spec)
    N = data.N
    rss = float(r @ r)
    if qg == 0 or rss <= 0:
        return np.zeros(qg)
    bounds = np.concatenate([[0], np.cumsum(data.sizes)])
    g = spec.gamma0
    within, dof = 0.0, 0
    signal = np.zeros(qg)
    inv_norm = np.zeros(qg)
    for i, c in enumerate(data.clusters):
        ri = r[bounds[i] : bounds[i + 1]]
        Zi = c.Z[:, g]
        zz = np.einsum("nk,nk->k", Zi, Zi)
        ok = zz > 0
        signal[ok] += (Zi[:, ok].T @ ri) ** 2 / zz[ok] ** 2
        inv_norm[ok] += 1.0 / zz[ok]
        if c.n > qg:
            coef, *_ = np.linalg.lstsq(Zi, ri, rcond=None)
            e = ri - Zi @ coef
            within += float(e @ e)
            dof += c.n - np.linalg.matrix_rank(Zi)
    v2 = within / dof if dof > 0 and within > 0 else rss / N
    m = data.m
    start = (signal / m - v2 * inv_norm / m) / v2
    start = np.where(np.isfinite(start), start, 0.0)
    return np.clip(start, 0.0, THETA_CAP)


def fit(data: Dataset, spec: ModelSpec, options: FitOptions = FitOptions()) -> MLFit:
    """ML estimates of (theta, v2, beta) for model ``spec``.

    Every start in ``options.starts`` is run; the lowest objective wins, with
    ties (1e-10) broken by the smaller L1 norm of theta.
    """
    prob = ProfileProblem(data, spec)
    qg = spec.q_gamma
    ev0, _ = prob.evaluate(np.zeros(qg))
    if ev0.degenerate:
        raise DegenerateFitError("residual sum of squares is numerically zero; v2 cannot be estimated")

    if qg == 0:
        return MLFit(spec, np.zeros(0), ev0.v2_profiled, ev0.beta_hat, ev0.neg2loglik, 0, True, 0.0,
                     history=(ev0.neg2loglik,))

    def fun(theta):
        ev, g = prob.evaluate(theta, gradient=True)
        if ev.degenerate:
            return np.inf, np.zeros(qg)
        return ev.neg2loglik, g

    if options.starts is None:
        starts = [np.zeros(qg), method_of_moments_start(data, spec)]
    else:
        starts = [np.asarray(s, dtype=float).reshape(qg) for s in options.starts]
    gtol = options.grad_tol * data.N

    best = None
    for x0 in starts:
        run = projected_bfgs(fun, x0, gtol, options.step_tol, options.max_iter)
        if best is None:
            best = run
            continue
        if run.f < best.f - 1e-10 or (abs(run.f - best.f) <= 1e-10 and run.x.sum() < best.x.sum()):
            best = run

    theta = best.x
    ev, _ = prob.evaluate(theta)
    return MLFit(
        spec=spec,
        theta_hat=theta,
        v2_hat=ev.v2_profiled,
        beta_hat=ev.beta_hat,
        neg2loglik_min=ev.neg2loglik,
        iterations=best.iterations,
        converged=best.kkt <= gtol,
        kkt_residual=best.kkt,
        at_cap=bool(np.any(theta >= THETA_CAP)),
        history=tuple(best.history),
    )
