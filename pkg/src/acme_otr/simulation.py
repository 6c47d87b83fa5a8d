"""Simulation harness: the lognormal data-generating process, perturbed nuisances,
RMSE and coverage experiments, and margin-condition probes."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit, ndtr, ndtri

from .core import Dataset, NuisanceSet, Policy, ThresholdRule, TreatAll
from .estimator import (
    LEARN_MEDIAN_OPTIMAL,
    PolicyRequest,
    crossfit_value,
    eif_contributions,
    plugin_contributions,
    resolve_policy,
)
from .nuisance import FitConfig

DEFAULT_ALPHAS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5)
DEFAULT_NS = (100, 1000, 5000)
ORACLE_DRAWS = 10 ** 7
ORACLE_SEED = 20220101


def worker_count(requested: Optional[int] = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("ACME_OTR_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


@dataclass(frozen=True)
class LognormalDgp:
    """``X ~ N(0, I)``, ``logit pi(X) = X'beta``, ``log Y | X, A ~ N(X'beta + A, scale^2)``.

    Setting ``known_propensity`` replaces the logistic assignment with a
    constant one, as in a randomized trial.
    """

    beta: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    scale: float = 0.25
    known_propensity: Optional[float] = None

    @property
    def dim(self) -> int:
        return len(self.beta)

    def index(self, X: NDArray) -> NDArray:
        return np.asarray(X, dtype=float) @ np.asarray(self.beta)

    def sample_covariates(self, n: int, rng: np.random.Generator) -> NDArray:
        return rng.standard_normal((n, self.dim))

    def propensity(self, X) -> NDArray:
        if self.known_propensity is not None:
            return np.full(np.shape(X)[0], float(self.known_propensity))
        return expit(self.index(X))

    def median(self, a: int, X) -> NDArray:
        return np.exp(self.index(X) + a)

    def density_at_median(self, a: int, X) -> NDArray:
        return 1.0 / (self.median(a, X) * self.scale * math.sqrt(2 * math.pi))

    def mean(self, a: int, X) -> NDArray:
        return np.exp(self.index(X) + a + 0.5 * self.scale ** 2)

    def median_contrast(self, X) -> NDArray:
        return self.median(1, X) - self.median(0, X)

    def sample(self, n: int, seed) -> Dataset:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        X = self.sample_covariates(n, rng)
        a = (rng.random(n) < self.propensity(X)).astype(np.int64)
        y = np.exp(self.index(X) + a + self.scale * rng.standard_normal(n))
        return Dataset(X, a, y)

    def true_nuisances(self, eps_clip: float = 0.01, f_min: float = 1e-3) -> NuisanceSet:
        return NuisanceSet(
            pi=self.propensity,
            median=(lambda X: self.median(0, X), lambda X: self.median(1, X)),
            density_at_median=(lambda X: self.density_at_median(0, X), lambda X: self.density_at_median(1, X)),
            mean=(lambda X: self.mean(0, X), lambda X: self.mean(1, X)),
            eps_clip=eps_clip, f_min=f_min,
        )

    # closed forms (Gaussian moment generating function on a half space)

    def threshold_policy_value(self, column: int = 0) -> float:
        """ACME of ``1{x[column] > 0}``."""
        b = self.beta[column]
        base = math.exp(0.5 * float(np.dot(self.beta, self.beta)))
        return base * (math.e * ndtr(b) + ndtr(-b))

    def optimal_value(self) -> float:
        """ACME of the median-optimal policy, which treats everyone here."""
        return math.e * math.exp(0.5 * float(np.dot(self.beta, self.beta)))


def mc_policy_value(dgp: LognormalDgp, policy: Policy, draws: int = ORACLE_DRAWS,
                    seed: int = ORACLE_SEED, chunk: int = 10 ** 6) -> tuple[float, float]:
    """Monte Carlo ACME of ``policy`` from true medians; returns ``(estimate, standard error)``."""
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        X = dgp.sample_covariates(m, rng)
        d = policy.decide(X)
        v = np.where(d == 1, dgp.median(1, X), dgp.median(0, X))
        total += float(v.sum())
        total_sq += float((v * v).sum())
        done += m
    mean = total / draws
    var = total_sq / draws - mean * mean
    return mean, math.sqrt(max(var, 0.0) / draws)


# ---------------------------------------------------------------------------
# Perturbed nuisances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbConfig:
    """Nuisance errors ``eps_k ~ N(n^-alpha, n^-2alpha)``; ``alpha = inf`` means no error."""

    alpha: float
    n: int
    granularity: str = "replication"
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.granularity not in ("replication", "point"):
            raise ValueError("granularity must be 'replication' or 'point'")

    @property
    def size(self) -> float:
        return 0.0 if math.isinf(self.alpha) else self.n ** (-self.alpha)


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(h: NDArray) -> NDArray:
    with np.errstate(over="ignore"):
        h = (h + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        h = ((h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        h = ((h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return h ^ (h >> np.uint64(31))


def pointwise_normal(X: NDArray, key: int) -> NDArray:
    """Standard normal draws that are a deterministic function of each covariate row and ``key``."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    words = X.view(np.uint64)
    h = np.full(X.shape[0], np.uint64(key % 2 ** 64), dtype=np.uint64)
    for j in range(words.shape[1]):
        h = _splitmix(h ^ words[:, j])
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)


def perturbed_nuisances(dgp: LognormalDgp, cfg: PerturbConfig,
                        rng: Optional[np.random.Generator] = None,
                        z: Optional[NDArray] = None) -> NuisanceSet:
    """True nuisances shifted by ``eps = size * (1 + z)`` with standard normal ``z``.

    ``pi`` is shifted on the logit scale, medians and densities additively. With
    replication granularity ``z`` holds three shared draws (taken from ``rng`` or
    passed in); with point granularity every covariate row gets its own
    deterministic draws.
    """
    size = cfg.size
    if cfg.granularity == "replication":
        if z is None:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            z = rng.standard_normal(3)
        e1, e2, e3 = (size * (1.0 + zk) for zk in z)
        eps = [lambda X, e=e: e for e in (e1, e2, e3)]
    else:
        keys = np.random.default_rng(cfg.seed if rng is None else rng.integers(2 ** 63)).integers(
            0, 2 ** 63, size=3)
        eps = [lambda X, k=int(k): size * (1.0 + pointwise_normal(X, k)) for k in keys]

    return NuisanceSet(
        pi=lambda X: expit(logit(dgp.propensity(X)) + eps[0](X)),
        median=(lambda X: dgp.median(0, X) + eps[1](X), lambda X: dgp.median(1, X) + eps[1](X)),
        density_at_median=(lambda X: dgp.density_at_median(0, X) + eps[2](X),
                           lambda X: dgp.density_at_median(1, X) + eps[2](X)),
    )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """RMSE per ``(n, alpha, estimator)`` cell, in long format."""

    cells: list[dict]
    reps: int
    seed: int
    truth: float
    config: dict = field(default_factory=dict)

    def rmse(self, n: int, alpha: float, estimator: str) -> float:
        return self.cell(n, alpha, estimator)["rmse"]

    def cell(self, n: int, alpha: float, estimator: str) -> dict:
        for c in self.cells:
            if c["n"] == n and c["alpha"] == alpha and c["estimator"] == estimator:
                return c
        raise KeyError((n, alpha, estimator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "alpha", "estimator", "rmse", "mc_se", "bias", "reps"])
        for c in self.cells:
            w.writerow([c["n"], repr(c["alpha"]), c["estimator"], repr(c["rmse"]),
                        repr(c["mc_se"]), repr(c["bias"]), c["reps"]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"reps": self.reps, "seed": self.seed, "truth": self.truth,
                "config": self.config, "cells": self.cells}


def _rmse_replication(dgp, policy, n, rep, alphas, seed, granularity):
    data = dgp.sample(n, [seed, n, rep, 0])
    z = np.random.default_rng([seed, n, rep, 1]).standard_normal(3)
    out = np.empty((len(alphas), 2))
    for i, alpha in enumerate(alphas):
        cfg = PerturbConfig(alpha, n, granularity, seed=int(np.random.default_rng([seed, n, rep, 2]).integers(2 ** 62)))
        nuis = perturbed_nuisances(dgp, cfg, z=z)
        out[i, 0] = plugin_contributions(data, nuis.median, policy).mean()
        out[i, 1] = eif_contributions(data, policy, nuis).mean()
    return out


def rmse_experiment(dgp: LognormalDgp = LognormalDgp(), policy: Policy = ThresholdRule(0),
                    ns: Sequence[int] = DEFAULT_NS, alphas: Sequence[float] = DEFAULT_ALPHAS,
                    reps: int = 1000, seed: int = 0, granularity: str = "replication",
                    truth: Optional[float] = None, workers: Optional[int] = None) -> ExperimentReport:
    """Root mean squared error of the plug-in and doubly robust-style estimators.

    Every replication draws a dataset and one standard-normal vector for the
    nuisance errors; all alpha values reuse both, so differences across alpha
    reflect the error size only.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if truth is None:
        if not (isinstance(policy, ThresholdRule) and policy.threshold == 0):
            raise ValueError("pass truth= for policies without a closed-form value")
        truth = dgp.threshold_policy_value(policy.column)
    alphas = tuple(float(a) for a in alphas)
    tasks = [(n, rep) for n in ns for rep in range(reps)]
    with ThreadPoolExecutor(worker_count(workers)) as pool:
        results = list(pool.map(lambda t: _rmse_replication(dgp, policy, t[0], t[1], alphas, seed, granularity), tasks))

    cells = []
    for i_n, n in enumerate(ns):
        est = np.stack(results[i_n * reps:(i_n + 1) * reps])  # reps x alphas x 2
        err = est - truth
        for i_a, alpha in enumerate(alphas):
            for j, name in enumerate(("plug-in", "doubly-robust")):
                sq = err[:, i_a, j] ** 2
                mse = float(sq.mean())
                rmse = math.sqrt(mse)
                se_mse = float(sq.std(ddof=1) / math.sqrt(reps))
                cells.append({"n": int(n), "alpha": alpha, "estimator": name, "rmse": rmse,
                              "mc_se": se_mse / (2 * rmse) if rmse > 0 else 0.0,
                              "bias": float(err[:, i_a, j].mean()), "reps": reps})
    config = {"ns": list(map(int, ns)), "alphas": list(alphas), "reps": reps, "seed": seed,
              "granularity": granularity, "policy": policy.name, "beta": list(dgp.beta), "scale": dgp.scale}
    return ExperimentReport(cells, reps, seed, truth, config)


@dataclass
class CoverageReport:
    coverage: float
    mean_width: float
    reps: int
    n: int
    truth: float
    policy: str
    mean_estimate: float
    nuisances: str

    def to_dict(self) -> dict:
        return asdict(self)


def coverage_experiment(dgp: LognormalDgp = LognormalDgp(), policy_request: PolicyRequest = ThresholdRule(0),
                        n: int = 5000, reps: int = 1000, cfg: Optional[FitConfig] = None, seed: int = 0,
                        truth: Optional[float] = None, workers: Optional[int] = None) -> CoverageReport:
    """Fraction of replications whose 95% Wald interval covers the true ACME.

    With ``cfg=None`` the true nuisances are used on one sample per replication;
    otherwise nuisances are fitted with three-fold cross-fitting.
    """
    if reps < 100:
        raise ValueError("coverage needs at least 100 replications")
    if truth is None:
        if policy_request == LEARN_MEDIAN_OPTIMAL or isinstance(policy_request, TreatAll):
            truth = dgp.optimal_value()
        elif isinstance(policy_request, ThresholdRule) and policy_request.threshold == 0:
            truth = dgp.threshold_policy_value(policy_request.column)
        else:
            raise ValueError("pass truth= for this policy")
    true_nuis = dgp.true_nuisances()

    def one(rep):
        data = dgp.sample(n, [seed, n, rep, 3])
        if cfg is None:
            policy = resolve_policy(policy_request, true_nuis)
            vals = eif_contributions(data, policy, true_nuis)
            psi = float(vals.mean())
            se = float(vals.std(ddof=1) / math.sqrt(n))
            lo, hi = psi - 1.959964 * se, psi + 1.959964 * se
        else:
            est = crossfit_value(data, cfg, policy_request, seed=rep)
            psi, lo, hi = est.psi_hat, est.ci_lower, est.ci_upper
        return psi, lo, hi

    with ThreadPoolExecutor(worker_count(workers)) as pool:
        res = np.array(list(pool.map(one, range(reps))))
    covered = (res[:, 1] <= truth) & (truth <= res[:, 2])
    name = policy_request.name if isinstance(policy_request, Policy) else policy_request
    return CoverageReport(float(covered.mean()), float((res[:, 2] - res[:, 1]).mean()), reps, n,
                          float(truth), name, float(res[:, 0].mean()), "true" if cfg is None else "cross-fitted")


@dataclass
class MarginProbe:
    t: NDArray
    prob: NDArray
    slope: float

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "prob": self.prob.tolist(), "slope": self.slope}


def margin_probe(gamma: NDArray, t_grid: Sequence[float]) -> MarginProbe:
    """Empirical ``P(|gamma| <= t)`` over ``t_grid`` and its least-squares log-log slope.

    The slope uses only grid points with positive probability and is NaN when
    fewer than two remain.
    """
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t grid must be positive")
    g = np.sort(np.abs(np.asarray(gamma, dtype=float)))
    prob = np.searchsorted(g, t, side="right") / g.size
    ok = prob > 0
    slope = float(np.polyfit(np.log(t[ok]), np.log(prob[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return MarginProbe(t, prob, slope)


def lognormal_margin_cdf(dgp: LognormalDgp, t) -> NDArray:
    """Exact ``P(|m1(X) - m0(X)| <= t)`` for the lognormal model, where the contrast is ``(e - 1) exp(X'beta)``."""
    t = np.asarray(t, dtype=float)
    sd = math.sqrt(float(np.dot(dgp.beta, dgp.beta)))
    return ndtr(np.log(t / (math.e - 1)) / sd)


def write_report_files(report: ExperimentReport, out_dir: str, stem: str = "rmse") -> tuple[str, str]:
    from .cli import atomic_write

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    atomic_write(csv_path, report.to_csv())
    atomic_write(json_path, json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return csv_path, json_path
