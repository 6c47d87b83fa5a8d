"""ACME value estimation: influence-function contributions, plug-in and doubly robust-style
estimators, three-fold cross-fitting, policy learning and the efficiency bound."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .core import (
    Dataset,
    Evaluator,
    FoldReport,
    LearnedMeanOptimal,
    LearnedMedianOptimal,
    NuisanceSet,
    Policy,
    Row,
    ValueEstimate,
    _as_matrix,
    split_folds,
)
from .nuisance import (
    FitConfig,
    fit_conditional_mean,
    fit_conditional_median,
    fit_density_at_median,
    fit_propensity,
)

LEARN_MEDIAN_OPTIMAL = "median-optimal"
LEARN_MEAN_OPTIMAL = "mean-optimal"

# (training, density, evaluation) fold roles for each rotation
ROTATIONS: tuple[tuple[int, int, int], ...] = ((0, 1, 2), (0, 2, 1), (1, 2, 0))


def eif_contributions(data: Dataset, policy: Policy, nuis: NuisanceSet) -> NDArray:
    """Uncentred influence values ``xi_d(z)`` with nuisances plugged in, one per row.

    ``1{a = d(x)} / P(A = a | x) * (1/2 - 1{y <= m_a(x)}) / f_a(m_a(x) | x) + m_d(x)``
    """
    X, a, y = data.X, data.a, data.y
    d = policy.decide(X, a)
    pi = nuis.propensity(X)
    m0, m1 = nuis.median_at(0, X), nuis.median_at(1, X)
    f0, f1 = nuis.density_at(0, X), nuis.density_at(1, X)
    m_obs = np.where(a == 1, m1, m0)
    f_obs = np.where(a == 1, f1, f0)
    p_obs = np.where(a == 1, pi, 1 - pi)
    correction = (0.5 - (y <= m_obs)) / f_obs / p_obs
    correction = np.where(a == d, correction, 0.0)
    return correction + np.where(d == 1, m1, m0)


def eif_contribution(row: Row, policy: Policy, nuis: NuisanceSet) -> float:
    data = Dataset(np.atleast_1d(row.x)[None, :], [row.a], [row.y])
    return float(eif_contributions(data, policy, nuis)[0])


def plugin_contributions(data: Dataset, medians: tuple[Evaluator, Evaluator], policy: Policy) -> NDArray:
    m0 = np.asarray(medians[0](data.X), dtype=float)
    m1 = np.asarray(medians[1](data.X), dtype=float)
    d = policy.decide(data.X, data.a)
    return np.where(d == 1, m1, m0)


def plugin_value(eval_data: Dataset, medians: tuple[Evaluator, Evaluator], policy: Policy) -> ValueEstimate:
    """Sample mean of ``m_{d(x)}(x)``. The standard error is descriptive only."""
    if eval_data.n == 0:
        raise ValueError("empty evaluation data")
    vals = plugin_contributions(eval_data, medians, policy)
    return ValueEstimate.from_values(
        vals, "plug-in", policy=policy.name,
        notes=["plug-in standard error is descriptive; no inference theory backs it"],
    )


def dr_value(eval_data: Dataset, nuis: NuisanceSet, policy: Policy) -> ValueEstimate:
    """Doubly robust-style estimate: mean of the influence contributions, with a Wald interval."""
    if eval_data.n == 0:
        raise ValueError("empty evaluation data")
    return ValueEstimate.from_values(eif_contributions(eval_data, policy, nuis), "doubly-robust",
                                     policy=policy.name)


def learn_median_optimal(median1: Evaluator, median0: Evaluator) -> LearnedMedianOptimal:
    return LearnedMedianOptimal(median1, median0)


def learn_mean_optimal(mean1: Evaluator, mean0: Evaluator) -> LearnedMeanOptimal:
    return LearnedMeanOptimal(mean1, mean0)


# ---------------------------------------------------------------------------
# Cross-fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossFitPlan:
    folds: tuple[NDArray, NDArray, NDArray]
    seed: int
    rotations: tuple[tuple[int, int, int], ...] = ROTATIONS

    @classmethod
    def make(cls, data: Dataset, seed: int) -> "CrossFitPlan":
        if data.n < 3:
            raise ValueError("cross-fitting needs at least 3 observations")
        return cls(tuple(split_folds(data.n, 3, seed)), seed)


@dataclass(frozen=True)
class FittedRotation:
    train: NDArray
    density: NDArray
    evaluate: NDArray
    nuisances: NuisanceSet


def fit_nuisances(train: Dataset, density_data: Dataset, cfg: FitConfig,
                  with_means: bool = False) -> NuisanceSet:
    """Propensity and medians from ``train``; densities at those medians from ``density_data``."""
    pi = fit_propensity(train, cfg)
    medians = tuple(fit_conditional_median(train, a, cfg) for a in (0, 1))
    dens = tuple(fit_density_at_median(density_data, a, medians[a], cfg.kernel, cfg) for a in (0, 1))
    means = tuple(fit_conditional_mean(train, a, cfg) for a in (0, 1)) if with_means else None
    return NuisanceSet(pi, medians, dens, means, eps_clip=cfg.eps_clip, f_min=cfg.f_min)


def _check_arms(data: Dataset, fold: int, label: str) -> None:
    for a in (0, 1):
        if not np.any(data.a == a):
            raise ValueError(f"fold D{fold + 1} ({label}) has no observations with treatment {a}")


def crossfit_nuisances(data: Dataset, cfg: FitConfig = FitConfig(), seed: int = 0,
                       with_means: bool = False) -> list[FittedRotation]:
    """Fit nuisances for the three rotations (D1,D2,D3), (D1,D3,D2), (D2,D3,D1)."""
    plan = CrossFitPlan.make(data, seed)
    out = []
    for i_train, i_dens, i_eval in plan.rotations:
        train = data.subset(plan.folds[i_train])
        dens = data.subset(plan.folds[i_dens])
        _check_arms(train, i_train, "nuisance training")
        _check_arms(dens, i_dens, "density training")
        nuis = fit_nuisances(train, dens, cfg, with_means=with_means)
        out.append(FittedRotation(plan.folds[i_train], plan.folds[i_dens], plan.folds[i_eval], nuis))
    return out


PolicyRequest = Union[Policy, str]


def resolve_policy(request: PolicyRequest, nuis: NuisanceSet) -> Policy:
    if isinstance(request, Policy):
        return request
    if request == LEARN_MEDIAN_OPTIMAL:
        return learn_median_optimal(nuis.median[1], nuis.median[0])
    if request == LEARN_MEAN_OPTIMAL:
        if nuis.mean is None:
            raise ValueError("mean-optimal policy requires fitted conditional means")
        return learn_mean_optimal(nuis.mean[1], nuis.mean[0])
    raise ValueError(f"unknown policy request {request!r}")


def aggregate_rotations(data: Dataset, rotations: Sequence[FittedRotation], request: PolicyRequest,
                        estimator: str = "doubly-robust") -> ValueEstimate:
    """Average the per-rotation estimates; the standard error pools all contributions."""
    fold_reports, pooled = [], []
    name = request.name if isinstance(request, Policy) else request
    for rot in rotations:
        ev = data.subset(rot.evaluate)
        policy = resolve_policy(request, rot.nuisances)
        if estimator == "doubly-robust":
            vals = eif_contributions(ev, policy, rot.nuisances)
        elif estimator == "plug-in":
            vals = plugin_contributions(ev, rot.nuisances.median, policy)
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
        fold_reports.append(FoldReport(float(np.mean(vals)), ev.n))
        pooled.append(vals)
    psi = float(np.mean([f.psi_hat for f in fold_reports]))
    notes = ["plug-in standard error is descriptive; no inference theory backs it"] if estimator == "plug-in" else []
    est = ValueEstimate.from_values(np.concatenate(pooled), estimator, policy=name, psi_hat=psi, notes=notes)
    est.folds = fold_reports
    return est


def crossfit_value(data: Dataset, cfg: FitConfig = FitConfig(),
                   policy_request: PolicyRequest = LEARN_MEDIAN_OPTIMAL, seed: int = 0,
                   estimator: str = "doubly-robust") -> ValueEstimate:
    """Cross-fitted ACME estimate of a fixed policy or of the learned mean/median optimal policy.

    Each rotation fits the propensity and medians on its first fold, the
    densities on its second and evaluates on its third; learned policies are
    rebuilt from that rotation's fits.
    """
    rotations = crossfit_nuisances(data, cfg, seed, with_means=policy_request == LEARN_MEAN_OPTIMAL)
    return aggregate_rotations(data, rotations, policy_request, estimator)


# ---------------------------------------------------------------------------
# Efficiency bound
# ---------------------------------------------------------------------------


def variance_bound_terms(d: NDArray, pi: NDArray, f0: NDArray, f1: NDArray, m_d: NDArray,
                         weights: Optional[NDArray] = None) -> float:
    """``E[d / (4 pi f1^2) + (1 - d) / (4 (1 - pi) f0^2)] + Var(m_d)`` under ``weights``."""
    d = np.asarray(d, dtype=float)
    inner = d / (4 * pi * f1 ** 2) + (1 - d) / (4 * (1 - pi) * f0 ** 2)
    if weights is None:
        weights = np.full(d.shape[0], 1.0 / d.shape[0])
    mean_md = np.sum(weights * m_d)
    return float(np.sum(weights * inner) + np.sum(weights * (m_d - mean_md) ** 2))


def analytic_variance_bound(model, policy, n_mc: int = 10 ** 6, seed: int = 0) -> float:
    """Efficiency bound ``sigma_d^2`` for estimating the ACME of ``policy``.

    ``model`` is either a :class:`~acme_otr.analytic.DiscreteModel` (exact sum
    over the support; ``policy`` maps labels to decisions) or a sampler exposing
    ``sample_covariates``, ``propensity``, ``median`` and ``density_at_median``,
    in which case the expectation is a Monte Carlo average over ``n_mc`` draws.
    """
    from .analytic import DiscreteModel

    if isinstance(model, DiscreteModel):
        d = np.array(model.policy_vector(policy), dtype=float)
        p = np.array(model.probs)
        pi = np.array(model.pis)
        f0 = np.array([model.density_at_median(x, 0) for x in model.labels])
        f1 = np.array([model.density_at_median(x, 1) for x in model.labels])
        m0 = np.array([model.median(x, 0) for x in model.labels])
        m1 = np.array([model.median(x, 1) for x in model.labels])
        return variance_bound_terms(d, pi, f0, f1, np.where(d == 1, m1, m0), weights=p)

    if n_mc < 1000:
        raise ValueError("Monte Carlo bound needs at least 1000 draws")
    X = model.sample_covariates(n_mc, np.random.default_rng(seed))
    d = policy.decide(X)
    m0, m1 = model.median(0, X), model.median(1, X)
    return variance_bound_terms(d, model.propensity(X), model.density_at_median(0, X),
                                model.density_at_median(1, X), np.where(d == 1, m1, m0))
