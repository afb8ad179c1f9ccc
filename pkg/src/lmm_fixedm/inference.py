"""Confidence intervals for random-effect variances.

Two intervals are provided for sigma_k^2:

* ``classical-normal``: sigma2 -/+ sqrt(2 sigma2^2 / m) * z_{1-a/2}, which
  relies on the number of clusters m growing;
* ``fixedm-chisquare``: (m sigma2 / chi2_{m,1-a/2}, m sigma2 / chi2_{m,a/2}),
  valid with m held fixed while cluster sizes grow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .kernel import DomainError
from .optimize import MLFit

CLASSICAL = "classical-normal"
FIXEDM = "fixedm-chisquare"


@dataclass(frozen=True)
class ConfidenceInterval:
    k: int
    lower: float
    upper: float
    level: float
    method: str

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


# Wichura (1988) AS 241, PPND16.
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
      45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
      1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
      0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15)


def _poly(coef, x):
    acc = 0.0
    for c in reversed(coef):
        acc = acc * x + c
    return acc


def normal_quantile(a: float) -> float:
    """Standard normal quantile Phi^{-1}(a)."""
    if not 0.0 < a < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {a}")
    q = a - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = a if q < 0 else 1.0 - a
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0 else val


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _gamma_series(s: float, x: float) -> float:
    # P(s, x) by the power series; converges quickly for x < s + 1
    term = 1.0 / s
    total = term
    ap = s
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _gamma_cfrac(s: float, x: float) -> float:
    # Q(s, x) by the modified Lentz continued fraction; for x >= s + 1
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return h * math.exp(-x + s * math.log(x) - math.lgamma(s))


def gamma_p(s: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(s, x)."""
    if x <= 0:
        return 0.0
    if x < s + 1.0:
        return _gamma_series(s, x)
    return 1.0 - _gamma_cfrac(s, x)


def gamma_q(s: float, x: float) -> float:
    if x <= 0:
        return 1.0
    if x < s + 1.0:
        return 1.0 - _gamma_series(s, x)
    return _gamma_cfrac(s, x)


def chisq_cdf(x: float, df: float) -> float:
    return gamma_p(df / 2.0, x / 2.0)


def chisq_quantile(df: int, a: float) -> float:
    """Quantile of the chi-square distribution with ``df`` degrees of freedom.

    Wilson-Hilferty starting value, then safeguarded Newton iterations on
    the incomplete-gamma CDF (bisection whenever Newton leaves the bracket).
    """
    if not 0.0 < a < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {a}")
    if df <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    if df == 2:
        return -2.0 * math.log1p(-a)
    s = df / 2.0
    z = normal_quantile(a)
    c = 2.0 / (9.0 * df)
    x = df * max(1.0 - c + z * math.sqrt(c), 0.05) ** 3

    upper_tail = a > 0.5
    target = 1.0 - a if upper_tail else a

    def resid(t):
        # work in the smaller tail for accuracy
        return (gamma_q(s, t / 2.0) - target) if upper_tail else (gamma_p(s, t / 2.0) - target)

    lo, hi = 0.0, max(2.0 * x, 1.0)
    while resid(hi) * (-1 if upper_tail else 1) < 0:
        lo, hi = hi, 2.0 * hi
    log_norm = s * math.log(2.0) + math.lgamma(s)
    for _ in range(200):
        r = resid(x)
        if (r < 0) != upper_tail:
            lo = x
        else:
            hi = x
        dens = math.exp((s - 1.0) * math.log(x) - x / 2.0 - log_norm) if x > 0 else 0.0
        step = r / dens if dens > 0 else math.inf
        x_new = x + step if upper_tail else x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * x_new:
            x = x_new
            break
        x = x_new
    return x


def _alpha(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    return 1.0 - level


def classical_interval(sigma2: float, m: int, level: float = 0.95) -> tuple[float, float]:
    a = _alpha(level)
    half = math.sqrt(2.0 * sigma2**2 / m) * normal_quantile(1.0 - a / 2.0)
    # variance parameter: negative lower endpoints are clamped at zero
    return max(sigma2 - half, 0.0), sigma2 + half


def fixedm_interval(sigma2: float, m: int, level: float = 0.95) -> tuple[float, float]:
    a = _alpha(level)
    if m < 1:
        raise DomainError(f"number of clusters must be >= 1, got {m}")
    return m * sigma2 / chisq_quantile(m, 1.0 - a / 2.0), m * sigma2 / chisq_quantile(m, a / 2.0)


def _sigma2(fit: MLFit, k: int) -> float:
    s2 = fit.sigma2_hat
    if k not in s2:
        raise ValueError(f"random effect {k} is not in the fitted model gamma={fit.spec.gamma}")
    return s2[k]


def classical_ci(fit: MLFit, m: int, k: int, level: float = 0.95) -> ConfidenceInterval:
    lo, hi = classical_interval(_sigma2(fit, k), m, level)
    return ConfidenceInterval(k, lo, hi, level, CLASSICAL)


def fixedm_ci(fit: MLFit, m: int, k: int, level: float = 0.95) -> ConfidenceInterval:
    lo, hi = fixedm_interval(_sigma2(fit, k), m, level)
    return ConfidenceInterval(k, lo, hi, level, FIXEDM)
