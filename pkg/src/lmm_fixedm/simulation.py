"""Seeded data generators, replicate runner and study summaries.

A :class:`Scenario` describes the design (cluster sizes, covariate law, true
parameters) plus the candidate model to fit. Every replicate draws from its
own normal stream keyed by ``(seed, replicate_index)``, so results do not
depend on the order or the process in which replicates run.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .inference import CLASSICAL, FIXEDM, classical_interval, fixedm_interval
from .likelihood import DegenerateFitError, RankError
from .model import Cluster, Dataset, ModelSpec, TrueParams
from .optimize import FitOptions, fit
from .prediction import d_statistic

THREADS_ENV = "LMM_FIXEDM_THREADS"
METHOD_KEYS = {"classical": CLASSICAL, "fixedm": FIXEDM}


class ScenarioError(ValueError):
    pass


class StudyError(RuntimeError):
    pass


def gaussian_stream(seed: int, replicate_index: int) -> np.random.Generator:
    """Independent, reproducible generator for one replicate."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(replicate_index)])))


def toeplitz_cov(dim: int, rho: float) -> np.ndarray:
    if not abs(rho) < 1:
        raise ScenarioError(f"Toeplitz correlation must satisfy |rho| < 1, got {rho}")
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def unbalanced_sizes(m: int, N: int) -> list[int]:
    """n_1 = [N^(1/4)], n_2 = [N^(3/4)], equal middle clusters, n_m takes the rest.

    [.] rounds to the nearest integer (half up).
    """
    if m < 3:
        raise ScenarioError("the unbalanced size rule needs m >= 3")
    rnd = lambda x: int(math.floor(x + 0.5))  # noqa: E731
    n1, n2 = rnd(N**0.25), rnd(N**0.75)
    mid = rnd((N - n1 - n2) / (m - 2))
    sizes = [n1, n2] + [mid] * (m - 3)
    sizes.append(N - sum(sizes))
    if min(sizes) < 1:
        raise ScenarioError(f"unbalanced rule gives an empty cluster for m={m}, N={N}: {sizes}")
    return sizes


@dataclass(frozen=True)
class Scenario:
    m: int
    size_rule: tuple  # ("balanced", n) | ("unbalanced", N) | ("explicit", (n_1, ..., n_m))
    params: TrueParams
    fit_spec: ModelSpec
    covariate_law: str = "iid"  # iid | toeplitz | lemma1 | explicit
    rho_x: float = 0.0
    rho_z: float = 0.0
    sigma_x: Optional[np.ndarray] = field(default=None, repr=False)
    sigma_z: Optional[np.ndarray] = field(default=None, repr=False)
    replications: int = 100
    seed: int = 0
    level: float = 0.95
    methods: tuple[str, ...] = ()

    def __post_init__(self):
        if self.m < 1:
            raise ScenarioError("m must be >= 1")
        if self.covariate_law not in ("iid", "toeplitz", "lemma1", "explicit"):
            raise ScenarioError(f"unknown covariate law {self.covariate_law!r}")
        if self.covariate_law == "lemma1" and (self.p != 2 or self.q != 2):
            raise ScenarioError("the lemma1 covariate law needs p = q = 2")
        for meth in self.methods:
            if meth not in (CLASSICAL, FIXEDM):
                raise ScenarioError(f"unknown interval method {meth!r}")
        self.sizes  # validates the size rule
        probe = Cluster(0, np.zeros(1), np.zeros((1, self.p)), np.zeros((1, self.q)))
        self.fit_spec.check(Dataset((probe,)))
        self._cholesky()

    @property
    def p(self) -> int:
        return len(self.params.beta0)

    @property
    def q(self) -> int:
        return len(self.params.sigma0_sq)

    @property
    def sizes(self) -> list[int]:
        kind, value = self.size_rule
        if kind == "balanced":
            sizes = [int(value)] * self.m
        elif kind == "unbalanced":
            sizes = unbalanced_sizes(self.m, int(value))
        elif kind == "explicit":
            sizes = [int(v) for v in value]
        else:
            raise ScenarioError(f"unknown size rule {kind!r}")
        if len(sizes) != self.m or min(sizes) < 1:
            raise ScenarioError(f"need {self.m} positive cluster sizes, got {sizes}")
        return sizes

    def _cholesky(self):
        law = self.covariate_law
        if law == "iid":
            return None, None
        if law in ("toeplitz", "lemma1"):
            sx, sz = toeplitz_cov(self.p, self.rho_x), toeplitz_cov(self.q, self.rho_z)
        else:
            sx, sz = np.asarray(self.sigma_x, dtype=float), np.asarray(self.sigma_z, dtype=float)
        try:
            return np.linalg.cholesky(sx), np.linalg.cholesky(sz)
        except np.linalg.LinAlgError:
            raise ScenarioError("covariate covariance is not positive definite") from None


@dataclass(frozen=True)
class Replicate:
    data: Dataset
    b: np.ndarray  # (m, q) realized random effects
    eps: Optional[list[np.ndarray]] = None


def generate(scenario: Scenario, replicate_index: int, keep_errors: bool = False,
             antithetic: bool = False) -> Replicate:
    """Draw one dataset y_i = X_i beta0 + Z_i b_i + eps_i.

    With ``antithetic=True`` replicates 2j and 2j+1 share covariates and
    random effects and use errors eps and -eps respectively.
    """
    sign = 1.0
    if antithetic:
        sign = -1.0 if replicate_index % 2 else 1.0
        replicate_index //= 2
    rng = gaussian_stream(scenario.seed, replicate_index)
    Lx, Lz = scenario._cholesky()
    beta = np.asarray(scenario.params.beta0)
    sd_b = np.sqrt(np.asarray(scenario.params.sigma0_sq))
    sd_e = math.sqrt(scenario.params.v0_sq)
    p, q = scenario.p, scenario.q
    clusters, bs, errs = [], [], []
    for i, n in enumerate(scenario.sizes):
        X = rng.standard_normal((n, p))
        Z = rng.standard_normal((n, q))
        if Lx is not None:
            X = X @ Lx.T
            Z = Z @ Lz.T
        b = sd_b * rng.standard_normal(q)
        e = sign * sd_e * rng.standard_normal(n)
        clusters.append(Cluster(i + 1, X @ beta + Z @ b + e, X, Z))
        bs.append(b)
        errs.append(e)
    return Replicate(Dataset(tuple(clusters)), np.array(bs).reshape(len(bs), q), errs if keep_errors else None)


def _fit_replicate(args) -> dict:
    scenario, r = args
    rep = generate(scenario, r)
    spec = scenario.fit_spec
    row: dict = {"replicate": r}
    try:
        f = fit(rep.data, spec, FitOptions())
    except (DegenerateFitError, RankError, np.linalg.LinAlgError) as exc:
        row["status"] = f"failed: {exc}"
        return row
    row["status"] = "ok"
    row["converged"] = int(f.converged)
    row["iterations"] = f.iterations
    row["neg2loglik"] = f.neg2loglik_min
    row["v2"] = f.v2_hat
    s2 = f.sigma2_hat
    for k, t in zip(spec.gamma, f.theta_hat):
        row[f"sigma2_{k}"] = s2[k]
        row[f"theta_{k}"] = float(t)
        row[f"mean_b2_{k}"] = float(np.mean(rep.b[:, k - 1] ** 2))
    m = rep.data.m
    for meth in scenario.methods:
        tag = "classical" if meth == CLASSICAL else "fixedm"
        interval = classical_interval if meth == CLASSICAL else fixedm_interval
        for k in spec.gamma:
            lo, hi = interval(s2[k], m, scenario.level)
            truth = scenario.params.sigma0_sq[k - 1]
            row[f"lower_{tag}_{k}"] = lo
            row[f"upper_{tag}_{k}"] = hi
            row[f"cover_{tag}_{k}"] = int(lo <= truth <= hi)
    return row


def _workers(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    return max(1, int(threads))


def run_replicates(func, scenario: Scenario, threads: Optional[int] = None, extra: tuple = ()) -> list:
    tasks = [(scenario, r, *extra) for r in range(scenario.replications)]
    workers = _workers(threads)
    if workers == 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


@dataclass
class StudySummary:
    estimands: list[str]
    mean: dict[str, float]
    sd: dict[str, float]
    coverage: dict[tuple[str, int], float]
    coverage_se: dict[tuple[str, int], float]
    raw: list[dict]
    n_failed: int

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.raw if r["status"] == "ok"], dtype=float)


def summarize(scenario: Scenario, raw: list[dict]) -> StudySummary:
    raw = sorted(raw, key=lambda r: r["replicate"])
    ok = [r for r in raw if r["status"] == "ok"]
    n_failed = len(raw) - len(ok)
    if n_failed > 0.01 * len(raw):
        raise StudyError(f"{n_failed} of {len(raw)} replicate fits failed")
    estimands = [f"sigma2_{k}" for k in scenario.fit_spec.gamma] + ["v2"]
    mean, sd = {}, {}
    for name in estimands:
        vals = np.array([r[name] for r in ok], dtype=float)
        mean[name] = float(vals.mean())
        sd[name] = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
    cov, se = {}, {}
    for meth in scenario.methods:
        tag = "classical" if meth == CLASSICAL else "fixedm"
        for k in scenario.fit_spec.gamma:
            P = float(np.mean([r[f"cover_{tag}_{k}"] for r in ok]))
            cov[(meth, k)] = P
            se[(meth, k)] = math.sqrt(P * (1.0 - P) / len(ok))
    return StudySummary(estimands, mean, sd, cov, se, raw, n_failed)


def run_study(scenario: Scenario, threads: Optional[int] = None) -> StudySummary:
    """Fit every replicate and aggregate means, SDs and interval coverage."""
    return summarize(scenario, run_replicates(_fit_replicate, scenario, threads))


def _gap_replicate(args) -> float:
    scenario, r, antithetic = args
    rep = generate(scenario, r, antithetic=antithetic)
    f = fit(rep.data, scenario.fit_spec)
    n = rep.data.N / rep.data.m
    return n * d_statistic(rep.data, rep.b[:, 0], f.sigma2_hat[1], f.v2_hat)


def run_gap_study(scenario: Scenario, threads: Optional[int] = None, antithetic: bool = False) -> np.ndarray:
    """n * D(sigma1_hat^2, v_hat^2) per replicate for a p=0, q=1 balanced scenario.

    n D carries a mean-zero term of order sqrt(n) that is odd in the errors;
    ``antithetic=True`` pairs replicates with eps and -eps so that this term
    cancels within each pair while every replicate keeps its marginal law.
    """
    if scenario.p != 0 or scenario.q != 1:
        raise ScenarioError("the prediction-gap study needs p = 0 and q = 1")
    if antithetic and scenario.replications % 2:
        raise ScenarioError("antithetic sampling needs an even number of replicates")
    return np.array(run_replicates(_gap_replicate, scenario, threads, extra=(antithetic,)))


# ---------------------------------------------------------------------------
# scenario files and study output
# ---------------------------------------------------------------------------

SCENARIO_KEYS = ("m", "N", "n", "p", "q", "beta0", "sigma0_sq", "v0_sq", "covariate_law", "rho_x",
                 "rho_z", "alpha", "gamma", "reps", "seed", "level", "methods")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def parse_scenario(text: str) -> Scenario:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCENARIO_KEYS:
            raise ScenarioError(f"unknown key: {key}")
        kv[key] = value
    try:
        return _scenario_from_keys(kv)
    except KeyError as exc:
        raise ScenarioError(f"missing key: {exc.args[0]}") from None
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None


def _scenario_from_keys(kv: dict[str, str]) -> Scenario:
    m = int(kv["m"])
    if "N" in kv and "n" in kv:
        raise ScenarioError("give either N (unbalanced) or n (balanced/explicit), not both")
    if "N" in kv:
        size_rule = ("unbalanced", int(kv["N"]))
    else:
        ns = _ints(kv["n"])
        size_rule = ("balanced", ns[0]) if len(ns) == 1 else ("explicit", ns)
    beta0, sigma0 = _floats(kv["beta0"]) if kv.get("beta0") else (), _floats(kv["sigma0_sq"])
    if "p" in kv and int(kv["p"]) != len(beta0):
        raise ScenarioError(f"p={kv['p']} but beta0 has {len(beta0)} entries")
    if "q" in kv and int(kv["q"]) != len(sigma0):
        raise ScenarioError(f"q={kv['q']} but sigma0_sq has {len(sigma0)} entries")
    params = TrueParams(beta0, sigma0, float(kv.get("v0_sq", 1.0)))
    methods_text = kv.get("methods", "none").strip()
    if methods_text in ("", "none"):
        methods: tuple[str, ...] = ()
    elif methods_text == "both":
        methods = (CLASSICAL, FIXEDM)
    else:
        try:
            methods = tuple(METHOD_KEYS[t.strip()] for t in methods_text.split(","))
        except KeyError as exc:
            raise ScenarioError(f"unknown method {exc.args[0]!r}") from None
    return Scenario(
        m=m,
        size_rule=size_rule,
        params=params,
        fit_spec=ModelSpec(_ints(kv.get("alpha", "")), _ints(kv.get("gamma", ""))),
        covariate_law=kv.get("covariate_law", "iid"),
        rho_x=float(kv.get("rho_x", 0.0)),
        rho_z=float(kv.get("rho_z", 0.0)),
        replications=int(kv.get("reps", 100)),
        seed=int(kv.get("seed", 0)),
        level=float(kv.get("level", 0.95)),
        methods=methods,
    )


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario file shipped with the package, e.g. ``table7_m10_n100.scn``."""
    path = Path(__file__).parent / "scenarios" / name
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_raw_csv(summary: StudySummary, path) -> None:
    cols: list[str] = []
    for r in summary.raw:
        for key in r:
            if key not in cols:
                cols.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in summary.raw:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def write_summary_csv(scenario: Scenario, summary: StudySummary, path) -> None:
    """One column per estimand; rows mean/sd and, per interval method, coverage and its SE."""
    cols = summary.estimands
    rows = [["mean"] + [f"{summary.mean[c]:.6g}" for c in cols],
            ["sd"] + [f"{summary.sd[c]:.6g}" for c in cols]]
    for meth in scenario.methods:
        tag = "classical" if meth == CLASSICAL else "fixedm"
        cov_row, se_row = [f"coverage_{tag}"], [f"se_{tag}"]
        for c in cols:
            if c.startswith("sigma2_"):
                k = int(c.split("_")[1])
                cov_row.append(f"{summary.coverage[(meth, k)]:.6g}")
                se_row.append(f"{summary.coverage_se[(meth, k)]:.6g}")
            else:
                cov_row.append("")
                se_row.append("")
        rows += [cov_row, se_row]
    rows.append(["failed"] + [str(summary.n_failed)] + [""] * (len(cols) - 1))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic"] + cols)
        w.writerows(rows)
