"""Shared domain types: datasets, treatment policies, nuisance bundles and value reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

Evaluator = Callable[[NDArray], NDArray]

Z_975: float = 1.959964
EPS_CLIP: float = 0.01
F_MIN: float = 1e-3


class DimensionError(ValueError):
    """Covariates do not have the dimension a policy or evaluator expects."""


@dataclass(frozen=True)
class Dataset:
    """Observations ``(x, a, y)`` with ``x`` in R^d, ``a`` in {0, 1} and real ``y``.

    Arrays are copied and made read-only on construction.
    """

    X: NDArray
    a: NDArray
    y: NDArray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        a = np.array(self.a)
        y = np.array(self.y, dtype=float)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError("covariates must be an (n, d) array with d >= 1")
        n = X.shape[0]
        if n < 1:
            raise ValueError("a dataset needs at least one row")
        if a.shape != (n,) or y.shape != (n,):
            raise ValueError(f"expected {n} treatments and outcomes, got {a.shape} and {y.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment values must be 0 or 1")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        a = a.astype(np.int64)
        for arr in (X, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx: ArrayLike) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.a[idx], self.y[idx])

    def arm(self, a: int) -> "Dataset":
        """Rows with treatment ``a``; raises if the arm is empty."""
        idx = np.flatnonzero(self.a == a)
        if idx.size == 0:
            raise ValueError(f"no observations with treatment {a}")
        return self.subset(idx)

    def row(self, i: int) -> "Row":
        return Row(self.X[i], int(self.a[i]), float(self.y[i]))


@dataclass(frozen=True)
class Row:
    x: NDArray
    a: int
    y: float


def _as_matrix(X: ArrayLike) -> NDArray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class Policy:
    """A deterministic treatment rule.

    ``decide(X, a)`` returns an int array of 0/1 decisions, one per row of ``X``.
    Only :class:`RecordedTreatment` reads ``a``.
    """

    dim: Optional[int] = None
    name: str = "policy"

    def _check(self, X: NDArray) -> NDArray:
        X = _as_matrix(X)
        if self.dim is not None and X.shape[1] != self.dim:
            raise DimensionError(
                f"{self.name} expects {self.dim} covariates, got {X.shape[1]}"
            )
        return X

    def decide(self, X: ArrayLike, a: Optional[ArrayLike] = None) -> NDArray:
        raise NotImplementedError


@dataclass(frozen=True)
class CovariateRule(Policy):
    """Arbitrary vectorised rule ``X -> {0,1}^n``."""

    rule: Callable[[NDArray], ArrayLike]
    dim: Optional[int] = None
    name: str = "covariate-rule"

    def decide(self, X, a=None):
        X = self._check(X)
        return (np.asarray(self.rule(X)) > 0).astype(np.int64)


@dataclass(frozen=True)
class ThresholdRule(Policy):
    """Treat iff ``x[column] > threshold``."""

    column: int
    threshold: float = 0.0
    dim: Optional[int] = None
    name: str = "threshold"

    def decide(self, X, a=None):
        X = self._check(X)
        if self.column >= X.shape[1]:
            raise DimensionError(f"column {self.column} out of range for {X.shape[1]} covariates")
        return (X[:, self.column] > self.threshold).astype(np.int64)


@dataclass(frozen=True)
class TreatAll(Policy):
    name: str = "treat-all"

    def decide(self, X, a=None):
        return np.ones(self._check(X).shape[0], dtype=np.int64)


@dataclass(frozen=True)
class TreatNone(Policy):
    name: str = "treat-none"

    def decide(self, X, a=None):
        return np.zeros(self._check(X).shape[0], dtype=np.int64)


@dataclass(frozen=True)
class LearnedMedianOptimal(Policy):
    """``1{m1(x) > m0(x)}``; ties go to control."""

    median1: Evaluator
    median0: Evaluator
    dim: Optional[int] = None
    name: str = "median-optimal"

    def decide(self, X, a=None):
        X = self._check(X)
        return (np.asarray(self.median1(X)) > np.asarray(self.median0(X))).astype(np.int64)


@dataclass(frozen=True)
class LearnedMeanOptimal(Policy):
    """``1{mu1(x) > mu0(x)}``; ties go to control."""

    mean1: Evaluator
    mean0: Evaluator
    dim: Optional[int] = None
    name: str = "mean-optimal"

    def decide(self, X, a=None):
        X = self._check(X)
        return (np.asarray(self.mean1(X)) > np.asarray(self.mean0(X))).astype(np.int64)


@dataclass(frozen=True)
class RecordedTreatment(Policy):
    """The observational policy: echoes each row's observed treatment."""

    name: str = "observational"

    def decide(self, X, a=None):
        X = self._check(X)
        if a is None:
            raise ValueError("RecordedTreatment can only be evaluated against dataset rows")
        a = np.asarray(a, dtype=np.int64).reshape(-1)
        if a.shape[0] != X.shape[0]:
            raise ValueError("treatment vector does not match covariate rows")
        return a.copy()


def evaluate_policy(policy: Policy, row: Row) -> int:
    """Decision of ``policy`` for a single dataset row."""
    return int(policy.decide(np.atleast_1d(row.x)[None, :], np.array([row.a]))[0])


def policy_decisions(policy: Policy, data: Dataset) -> NDArray:
    return policy.decide(data.X, data.a)


# ---------------------------------------------------------------------------
# Nuisances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceSet:
    """Propensity, conditional medians, densities at the median and (optionally) means.

    The raw evaluators are stored as given; the accessor methods apply the
    clipping ``pi in [eps_clip, 1 - eps_clip]`` and ``f >= f_min``.
    """

    pi: Evaluator
    median: tuple[Evaluator, Evaluator]
    density_at_median: tuple[Evaluator, Evaluator]
    mean: Optional[tuple[Evaluator, Evaluator]] = None
    eps_clip: float = EPS_CLIP
    f_min: float = F_MIN

    def __post_init__(self):
        if not 0 < self.eps_clip < 0.5:
            raise ValueError("eps_clip must lie in (0, 0.5)")
        if self.f_min <= 0:
            raise ValueError("f_min must be positive")

    def propensity(self, X: ArrayLike) -> NDArray:
        X = _as_matrix(X)
        p = np.broadcast_to(np.asarray(self.pi(X), dtype=float), (X.shape[0],))
        return np.clip(p, self.eps_clip, 1 - self.eps_clip)

    def median_at(self, a: int, X: ArrayLike) -> NDArray:
        X = _as_matrix(X)
        return np.broadcast_to(np.asarray(self.median[a](X), dtype=float), (X.shape[0],))

    def density_at(self, a: int, X: ArrayLike) -> NDArray:
        X = _as_matrix(X)
        f = np.broadcast_to(np.asarray(self.density_at_median[a](X), dtype=float), (X.shape[0],))
        return np.maximum(f, self.f_min)

    def mean_at(self, a: int, X: ArrayLike) -> NDArray:
        if self.mean is None:
            raise ValueError("this nuisance set carries no conditional means")
        X = _as_matrix(X)
        return np.broadcast_to(np.asarray(self.mean[a](X), dtype=float), (X.shape[0],))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class FoldReport:
    psi_hat: float
    n: int


@dataclass
class ValueEstimate:
    """Point estimate, standard error and 95% Wald interval for a policy value."""

    psi_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    estimator: str
    n: int
    policy: str = ""
    folds: list[FoldReport] = field(default_factory=list)
    contributions: Optional[NDArray] = field(default=None, repr=False)
    degenerate_ci: bool = False
    notes: list[str] = field(default_factory=list)

    @classmethod
    def from_values(
        cls,
        values: ArrayLike,
        estimator: str,
        policy: str = "",
        psi_hat: Optional[float] = None,
        keep: bool = True,
        notes: Sequence[str] = (),
    ) -> "ValueEstimate":
        """Mean, ``sd/sqrt(n)`` and Wald bounds from per-observation values.

        ``psi_hat`` overrides the mean (used when averaging fold estimates).
        A single value yields ``se = 0`` and a flagged degenerate interval.
        """
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        if n == 0:
            raise ValueError("cannot estimate a value from zero observations")
        psi = float(np.mean(values)) if psi_hat is None else float(psi_hat)
        degenerate = n < 2
        se = 0.0 if degenerate else float(np.std(values, ddof=1) / np.sqrt(n))
        half = Z_975 * se
        return cls(
            psi_hat=psi,
            se=se,
            ci_lower=psi - half,
            ci_upper=psi + half,
            estimator=estimator,
            n=n,
            policy=policy,
            contributions=values if keep else None,
            degenerate_ci=degenerate,
            notes=list(notes) + (["single observation: interval is degenerate"] if degenerate else []),
        )

    def covers(self, truth: float) -> bool:
        return self.ci_lower <= truth <= self.ci_upper

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "estimator": self.estimator,
            "psi_hat": self.psi_hat,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n": self.n,
            "folds": [{"psi_hat": f.psi_hat, "n": f.n} for f in self.folds],
            "degenerate_ci": self.degenerate_ci,
            "notes": list(self.notes),
        }


def split_folds(n: int | Dataset, k: int, seed: int) -> list[NDArray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if isinstance(n, Dataset):
        n = n.n
    if k < 2:
        raise ValueError("need at least two folds")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]
