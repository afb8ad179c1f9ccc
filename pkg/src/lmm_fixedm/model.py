"""Clustered data containers, candidate-model selection and CSV ingestion.

Column indices in :class:`ModelSpec` are 1-based, so ``alpha=(1, 2, 3)``
selects the first three fixed-effect covariates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

RANK_TOL = 1e-10


class InvalidSpecError(ValueError):
    """Model index sets that do not fit the data."""


class DataFormatError(ValueError):
    """Malformed input data (bad CSV, wrong shapes, non-finite values)."""


@dataclass(frozen=True)
class Cluster:
    """One group of observations sharing a draw of the random effects."""

    id: int
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(n, 0)
        if Z.ndim == 1 and Z.size == 0:
            Z = Z.reshape(n, 0)
        if n < 1:
            raise DataFormatError(f"cluster {self.id}: no observations")
        if X.ndim != 2 or X.shape[0] != n:
            raise DataFormatError(f"cluster {self.id}: X has shape {X.shape}, expected ({n}, p)")
        if Z.ndim != 2 or Z.shape[0] != n:
            raise DataFormatError(f"cluster {self.id}: Z has shape {Z.shape}, expected ({n}, q)")
        for arr in (y, X, Z):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A collection of clusters with common fixed/random covariate counts.

    Non-finite entries are allowed at construction so that :func:`validate`
    can report them; fitting routines assume a clean dataset.
    """

    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise DataFormatError("dataset needs at least one cluster")
        p, q = clusters[0].X.shape[1], clusters[0].Z.shape[1]
        for c in clusters:
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise DataFormatError(
                    f"cluster {c.id}: has {c.X.shape[1]} x / {c.Z.shape[1]} z columns, "
                    f"expected {p} / {q}"
                )
        object.__setattr__(self, "clusters", clusters)

    @classmethod
    def from_arrays(cls, cluster_ids, y, X, Z) -> "Dataset":
        """Group stacked arrays by cluster label (sorted by label)."""
        cluster_ids = np.asarray(cluster_ids)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        Z = np.asarray(Z, dtype=float).reshape(len(y), -1)
        clusters = []
        for label in np.unique(cluster_ids):
            rows = np.flatnonzero(cluster_ids == label)
            clusters.append(Cluster(int(label), y[rows], X[rows], Z[rows]))
        return cls(tuple(clusters))

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.clusters[0].Z.shape[1]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters], dtype=int)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def n_min(self) -> int:
        return int(self.sizes.min())

    @property
    def n_max(self) -> int:
        return int(self.sizes.max())

    @cached_property
    def padded(self) -> "PaddedData":
        return PaddedData.from_dataset(self)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (y, X, Z) stacked over clusters in cluster order."""
        y = np.concatenate([c.y for c in self.clusters])
        X = np.concatenate([c.X for c in self.clusters], axis=0)
        Z = np.concatenate([c.Z for c in self.clusters], axis=0)
        return y, X, Z


@dataclass(frozen=True)
class PaddedData:
    """Zero-padded ``(m, n_max, .)`` arrays.

    Padding rows have y = 0, X = 0 and Z = 0, so they add nothing to any
    quadratic form, and their block of H is the identity (log-determinant 0).
    """

    y: np.ndarray  # (m, n_max)
    X: np.ndarray  # (m, n_max, p)
    Z: np.ndarray  # (m, n_max, q)
    mask: np.ndarray  # (m, n_max) bool, True on real rows

    @classmethod
    def from_dataset(cls, data: Dataset) -> "PaddedData":
        m, nmax = data.m, data.n_max
        y = np.zeros((m, nmax))
        X = np.zeros((m, nmax, data.p))
        Z = np.zeros((m, nmax, data.q))
        mask = np.zeros((m, nmax), dtype=bool)
        for i, c in enumerate(data.clusters):
            y[i, : c.n] = c.y
            X[i, : c.n] = c.X
            Z[i, : c.n] = c.Z
            mask[i, : c.n] = True
        for arr in (y, X, Z, mask):
            arr.setflags(write=False)
        return cls(y, X, Z, mask)


@dataclass(frozen=True)
class ModelSpec:
    """Candidate model: 1-based fixed-effect indices ``alpha``, random-effect indices ``gamma``."""

    alpha: tuple[int, ...] = ()
    gamma: tuple[int, ...] = ()

    def __post_init__(self):
        alpha = tuple(int(a) for a in self.alpha)
        gamma = tuple(int(g) for g in self.gamma)
        for name, idx in (("alpha", alpha), ("gamma", gamma)):
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise InvalidSpecError(f"{name} indices must be strictly increasing: {idx}")
            if idx and idx[0] < 1:
                raise InvalidSpecError(f"{name} indices are 1-based: {idx}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def full(cls, p: int, q: int) -> "ModelSpec":
        return cls(tuple(range(1, p + 1)), tuple(range(1, q + 1)))

    @property
    def p_alpha(self) -> int:
        return len(self.alpha)

    @property
    def q_gamma(self) -> int:
        return len(self.gamma)

    @property
    def alpha0(self) -> np.ndarray:
        """0-based column positions of ``alpha``."""
        return np.array(self.alpha, dtype=int) - 1

    @property
    def gamma0(self) -> np.ndarray:
        return np.array(self.gamma, dtype=int) - 1

    def check(self, data: Dataset) -> None:
        if self.alpha and self.alpha[-1] > data.p:
            raise InvalidSpecError(f"fixed-effect index out of bounds: {self.alpha[-1]} > p={data.p}")
        if self.gamma and self.gamma[-1] > data.q:
            raise InvalidSpecError(f"random-effect index out of bounds: {self.gamma[-1]} > q={data.q}")


@dataclass(frozen=True)
class TrueParams:
    """Data-generating parameters (response-variance units)."""

    beta0: tuple[float, ...]
    sigma0_sq: tuple[float, ...]
    v0_sq: float = 1.0

    def __post_init__(self):
        beta0 = tuple(float(b) for b in self.beta0)
        sigma0_sq = tuple(float(s) for s in self.sigma0_sq)
        if not (np.isfinite(self.v0_sq) and self.v0_sq > 0):
            raise ValueError(f"v0_sq must be positive, got {self.v0_sq}")
        if any(not np.isfinite(s) or s < 0 for s in sigma0_sq):
            raise ValueError(f"sigma0_sq must be nonnegative and finite, got {sigma0_sq}")
        if any(not np.isfinite(b) for b in beta0):
            raise ValueError("beta0 must be finite")
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "sigma0_sq", sigma0_sq)
        object.__setattr__(self, "v0_sq", float(self.v0_sq))

    @property
    def theta0(self) -> np.ndarray:
        return np.asarray(self.sigma0_sq) / self.v0_sq

    @property
    def alpha_true(self) -> tuple[int, ...]:
        """Smallest correct fixed-effects model."""
        return tuple(j + 1 for j, b in enumerate(self.beta0) if b != 0)

    @property
    def gamma_true(self) -> tuple[int, ...]:
        return tuple(k + 1 for k, s in enumerate(self.sigma0_sq) if s > 0)


def select_design(data: Dataset, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-cluster ``(X_i(alpha), Z_i(gamma))`` column subsets, in cluster order."""
    spec.check(data)
    a, g = spec.alpha0, spec.gamma0
    return [(c.X[:, a], c.Z[:, g]) for c in data.clusters]


@dataclass
class Diagnostics:
    """Outcome of :func:`validate`. ``ok`` is True when nothing was flagged."""

    spec_errors: list[str] = field(default_factory=list)
    nonfinite: list[tuple[int, int, str]] = field(default_factory=list)
    x_rank_deficient: bool = False
    z_rank_deficient: bool = False
    x_min_eigenvalue: float = float("nan")
    z_min_eigenvalue: float = float("nan")

    @property
    def ok(self) -> bool:
        return not (self.spec_errors or self.nonfinite or self.x_rank_deficient or self.z_rank_deficient)


def _min_normalized_gram_eig(A: np.ndarray) -> float:
    if A.shape[1] == 0:
        return float("inf")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        return 0.0
    An = A / norms
    return float(np.linalg.eigvalsh(An.T @ An)[0])


def validate(data: Dataset, spec: ModelSpec) -> Diagnostics:
    """Report dimension, finiteness and rank problems; never raises."""
    diag = Diagnostics()
    try:
        spec.check(data)
    except InvalidSpecError as exc:
        diag.spec_errors.append(str(exc))

    for c in data.clusters:
        for name, arr in (("y", c.y[:, None]), ("X", c.X), ("Z", c.Z)):
            bad = np.argwhere(~np.isfinite(arr))
            for row, col in bad:
                label = name if name == "y" else f"{name.lower()}{col + 1}"
                diag.nonfinite.append((c.id, int(row), label))
    if diag.spec_errors or diag.nonfinite:
        return diag

    _, X, Z = data.stacked()
    diag.x_min_eigenvalue = _min_normalized_gram_eig(X[:, spec.alpha0])
    diag.z_min_eigenvalue = _min_normalized_gram_eig(Z[:, spec.gamma0])
    diag.x_rank_deficient = diag.x_min_eigenvalue < RANK_TOL
    diag.z_rank_deficient = diag.z_min_eigenvalue < RANK_TOL
    return diag


def read_csv(path) -> Dataset:
    """Load ``cluster,y,x1..xp,z1..zq`` rows into a :class:`Dataset`."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv_rows(csv.reader(fh))


def parse_csv_rows(rows: Iterable[Sequence[str]]) -> Dataset:
    it = iter(rows)
    try:
        header = [h.strip() for h in next(it)]
    except StopIteration:
        raise DataFormatError("line 1: empty file") from None
    if header[:2] != ["cluster", "y"]:
        raise DataFormatError("line 1: header must start with 'cluster,y'")
    xcols = [h for h in header[2:] if h.startswith("x")]
    zcols = [h for h in header[2:] if h.startswith("z")]
    expected = [f"x{j}" for j in range(1, len(xcols) + 1)] + [f"z{k}" for k in range(1, len(zcols) + 1)]
    if header[2:] != expected:
        raise DataFormatError(f"line 1: expected columns {','.join(['cluster', 'y'] + expected)}")

    ids, values = [], []
    for lineno, row in enumerate(it, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            values.append([float(cell) for cell in row[1:]])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
    if not ids:
        raise DataFormatError("no data rows")
    vals = np.array(values, dtype=float)
    p = len(xcols)
    return Dataset.from_arrays(ids, vals[:, 0], vals[:, 1 : 1 + p], vals[:, 1 + p :])


def write_csv(data: Dataset, path) -> None:
    header = ["cluster", "y"] + [f"x{j}" for j in range(1, data.p + 1)] + [f"z{k}" for k in range(1, data.q + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c in data.clusters:
            for r in range(c.n):
                w.writerow([c.id, repr(float(c.y[r]))] + [repr(float(v)) for v in c.X[r]] + [repr(float(v)) for v in c.Z[r]])
