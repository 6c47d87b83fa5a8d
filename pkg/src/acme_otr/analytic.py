"""Exact computations on finite-support covariate models with Gaussian or Gaussian-mixture arms.

Covers conditional and marginal medians, ACME values, the mean / marginal-median /
ACME optimal policies, the two-group Gaussian flip condition and a numeric
check of the first-order expansion of the ACME functional.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

BISECTION_TOL = 1e-10
TIE_TOL = 1e-9
MAX_ENUMERATION = 20
BRACKET_SIGMAS = 12.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ModelError(ValueError):
    """Invalid model specification; ``pointer`` locates the offending JSON node."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def bisect_increasing(fn: Callable[[float], float], target: float, lo: float, hi: float,
                      tol: float = BISECTION_TOL) -> float:
    """Smallest ``m`` in ``[lo, hi]`` with ``fn(m) >= target`` for nondecreasing ``fn``.

    Iterates until the bracket collapses to adjacent floats or ``fn`` is within
    ``tol`` of ``target`` on the right endpoint with a bracket narrower than 1e-13.
    """
    flo, fhi = fn(lo), fn(hi)
    if not (flo < target <= fhi):
        raise ValueError(f"bisection bracket [{lo}, {hi}] does not straddle {target}")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if fn(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-13 * max(1.0, abs(hi)) and abs(fn(hi) - target) <= tol:
            break
    return hi


# ---------------------------------------------------------------------------
# Outcome distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def components(self) -> tuple[tuple[float, "Gaussian"], ...]:
        return ((1.0, self),)

    def cdf(self, y):
        return ndtr((np.asarray(y, dtype=float) - self.mu) / self.sigma)

    def pdf(self, y):
        z = (np.asarray(y, dtype=float) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) * _INV_SQRT_2PI / self.sigma

    def pdf_derivative(self, y):
        y = np.asarray(y, dtype=float)
        return -(y - self.mu) / self.sigma ** 2 * self.pdf(y)

    @property
    def mean(self) -> float:
        return self.mu

    @property
    def sd(self) -> float:
        return self.sigma

    def bracket(self) -> tuple[float, float]:
        return self.mu - BRACKET_SIGMAS * self.sigma, self.mu + BRACKET_SIGMAS * self.sigma

    def median(self) -> float:
        return float(self.mu)

    def to_json(self) -> dict:
        return {"type": "gaussian", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Mixture:
    weights: tuple[float, ...]
    parts: tuple[Gaussian, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.parts) or not self.parts:
            raise ValueError("a mixture needs matching, nonempty weights and components")
        if any(w <= 0 for w in self.weights):
            raise ValueError("mixture weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")

    @classmethod
    def of(cls, *components: tuple[float, float, float]) -> "Mixture":
        """``Mixture.of((w, mu, sigma), ...)``."""
        return cls(tuple(float(w) for w, _, _ in components),
                   tuple(Gaussian(float(m), float(s)) for _, m, s in components))

    @property
    def components(self):
        return tuple(zip(self.weights, self.parts))

    def cdf(self, y):
        return sum(w * g.cdf(y) for w, g in self.components)

    def pdf(self, y):
        return sum(w * g.pdf(y) for w, g in self.components)

    def pdf_derivative(self, y):
        return sum(w * g.pdf_derivative(y) for w, g in self.components)

    @property
    def mean(self) -> float:
        return float(sum(w * g.mu for w, g in self.components))

    @property
    def sd(self) -> float:
        m = self.mean
        second = sum(w * (g.sigma ** 2 + g.mu ** 2) for w, g in self.components)
        return float(math.sqrt(max(second - m * m, 0.0)))

    def bracket(self) -> tuple[float, float]:
        return _bracket(self.parts)

    def median(self) -> float:
        lo, hi = self.bracket()
        return bisect_increasing(centred_cdf(self.components), 0.0, lo, hi)

    def to_json(self) -> dict:
        return {"type": "mixture",
                "components": [{"w": w, "mu": g.mu, "sigma": g.sigma} for w, g in self.components]}


Distribution = Union[Gaussian, Mixture]


def centred_cdf(weighted: Sequence[tuple[float, Gaussian]]) -> Callable[[float], float]:
    """``m -> F(m) - 1/2`` for a weighted sum of Gaussians, accurate when components are far apart.

    Uses ``Phi(z) - 1/2 = sign(z) (1/2 - Phi(-|z|))`` so that no term saturates at 1,
    which keeps the flat stretch between well separated components strictly increasing.
    """
    weighted = [(float(w), g) for w, g in weighted if w > 0]

    def fn(m: float) -> float:
        terms = []
        for w, g in weighted:
            z = (m - g.mu) / g.sigma
            if z == 0:
                continue
            s = 1.0 if z > 0 else -1.0
            terms += [s * w * 0.5, -s * w * float(ndtr(-abs(z)))]
        return math.fsum(terms)

    return fn


def _bracket(parts: Sequence[Gaussian]) -> tuple[float, float]:
    smax = max(g.sigma for g in parts)
    return (min(g.mu for g in parts) - BRACKET_SIGMAS * smax,
            max(g.mu for g in parts) + BRACKET_SIGMAS * smax)


# ---------------------------------------------------------------------------
# Discrete covariate models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteModel:
    """Finite covariate support with per-label probability, propensity and arm distributions."""

    labels: tuple[str, ...]
    probs: tuple[float, ...]
    arms: tuple[tuple[Distribution, Distribution], ...]
    pis: tuple[float, ...] = ()
    _medians: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        k = len(self.labels)
        if k == 0:
            raise ValueError("support must be nonempty")
        if len(set(self.labels)) != k:
            raise ValueError("support labels must be unique")
        if len(self.probs) != k or len(self.arms) != k:
            raise ValueError("labels, probabilities and arms must align")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError("label probabilities must be nonnegative and sum to 1")
        if not self.pis:
            object.__setattr__(self, "pis", tuple(0.5 for _ in self.labels))
        if len(self.pis) != k or any(not 0 < p < 1 for p in self.pis):
            raise ValueError("propensities must lie strictly inside (0, 1)")

    def index(self, x: str) -> int:
        try:
            return self.labels.index(x)
        except ValueError:
            raise KeyError(f"unknown support label {x!r}") from None

    def dist(self, x: str, a: int) -> Distribution:
        return self.arms[self.index(x)][a]

    def median(self, x: str, a: int) -> float:
        key = (x, a)
        if key not in self._medians:
            self._medians[key] = self.dist(x, a).median()
        return self._medians[key]

    def density_at_median(self, x: str, a: int) -> float:
        return float(self.dist(x, a).pdf(self.median(x, a)))

    def pi(self, x: str) -> float:
        return self.pis[self.index(x)]

    def policy_vector(self, policy) -> tuple[int, ...]:
        """Normalise a policy given as a label mapping, a callable or a sequence."""
        if isinstance(policy, Mapping):
            missing = [x for x in self.labels if x not in policy]
            if missing:
                raise KeyError(f"policy undefined at labels {missing}")
            return tuple(int(policy[x]) for x in self.labels)
        if callable(policy):
            return tuple(int(policy(x)) for x in self.labels)
        vec = tuple(int(v) for v in policy)
        if len(vec) != len(self.labels):
            raise ValueError("policy length does not match the support")
        return vec

    def replace(self, label: str, arm0: Optional[Distribution] = None,
                arm1: Optional[Distribution] = None, pi: Optional[float] = None) -> "DiscreteModel":
        i = self.index(label)
        arms, pis = list(self.arms), list(self.pis)
        arms[i] = (arm0 or arms[i][0], arm1 or arms[i][1])
        if pi is not None:
            pis[i] = pi
        return DiscreteModel(self.labels, self.probs, tuple(arms), tuple(pis))

    # -- JSON --------------------------------------------------------------

    @classmethod
    def from_json(cls, doc) -> "DiscreteModel":
        """Build a model from the ``{"support": [...]}`` document, reporting errors by JSON pointer."""
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        if not isinstance(doc, dict) or "support" not in doc:
            raise ModelError("", "expected an object with a 'support' array")
        support = doc["support"]
        if not isinstance(support, list) or not support:
            raise ModelError("/support", "must be a nonempty array")
        labels, probs, arms, pis = [], [], [], []
        for i, entry in enumerate(support):
            ptr = f"/support/{i}"
            if not isinstance(entry, dict):
                raise ModelError(ptr, "must be an object")
            for key in ("label", "p", "arm0", "arm1"):
                if key not in entry:
                    raise ModelError(f"{ptr}/{key}", "is required")
            labels.append(str(entry["label"]))
            probs.append(_number(entry["p"], f"{ptr}/p", lo=0.0))
            pis.append(_number(entry.get("pi", 0.5), f"{ptr}/pi", lo=0.0, open_lo=True, hi=1.0))
            arms.append((_arm(entry["arm0"], f"{ptr}/arm0"), _arm(entry["arm1"], f"{ptr}/arm1")))
        if len(set(labels)) != len(labels):
            raise ModelError("/support", "labels must be unique")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ModelError("/support", f"probabilities sum to {sum(probs)!r}, not 1")
        return cls(tuple(labels), tuple(probs), tuple(arms), tuple(pis))

    def to_json(self) -> dict:
        return {"support": [
            {"label": x, "p": p, "pi": pi, "arm0": arms[0].to_json(), "arm1": arms[1].to_json()}
            for x, p, pi, arms in zip(self.labels, self.probs, self.pis, self.arms)
        ]}


def _number(v, ptr, lo=None, hi=None, open_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ModelError(ptr, "must be a finite number")
    if lo is not None and (v < lo or (open_lo and v == lo)):
        raise ModelError(ptr, f"must be {'>' if open_lo else '>='} {lo}")
    if hi is not None and v >= hi:
        raise ModelError(ptr, f"must be < {hi}")
    return float(v)


def _arm(spec, ptr) -> Distribution:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ModelError(ptr, "must be an object with a 'type'")
    kind = spec["type"]
    if kind == "gaussian":
        mu = _number(spec.get("mu"), f"{ptr}/mu")
        sigma = _number(spec.get("sigma"), f"{ptr}/sigma", lo=0.0, open_lo=True)
        return Gaussian(mu, sigma)
    if kind == "mixture":
        comps = spec.get("components")
        if not isinstance(comps, list) or not comps:
            raise ModelError(f"{ptr}/components", "must be a nonempty array")
        parsed = []
        for j, c in enumerate(comps):
            cp = f"{ptr}/components/{j}"
            if not isinstance(c, dict):
                raise ModelError(cp, "must be an object")
            parsed.append((_number(c.get("w"), f"{cp}/w", lo=0.0, open_lo=True),
                           _number(c.get("mu"), f"{cp}/mu"),
                           _number(c.get("sigma"), f"{cp}/sigma", lo=0.0, open_lo=True)))
        if abs(sum(w for w, _, _ in parsed) - 1.0) > 1e-12:
            raise ModelError(f"{ptr}/components", "weights must sum to 1")
        return Mixture.of(*parsed)
    raise ModelError(f"{ptr}/type", f"unknown distribution type {kind!r}")


# ---------------------------------------------------------------------------
# Medians and values
# ---------------------------------------------------------------------------


def conditional_median(model: DiscreteModel, x: str, a: int) -> float:
    return model.median(x, a)


def marginal_median_value(model: DiscreteModel, policy) -> float:
    """Median of the outcome distribution mixed over labels, each under its assigned arm."""
    d = model.policy_vector(policy)
    weighted = [(p * w, g) for p, arms, a in zip(model.probs, model.arms, d) if p > 0
                for w, g in arms[a].components]
    lo, hi = _bracket([g for _, g in weighted])
    return bisect_increasing(centred_cdf(weighted), 0.0, lo, hi)


def acme_value(model: DiscreteModel, policy) -> float:
    d = model.policy_vector(policy)
    return float(sum(p * model.median(x, a) for x, p, a in zip(model.labels, model.probs, d) if p > 0))


def mean_value(model: DiscreteModel, policy) -> float:
    d = model.policy_vector(policy)
    return float(sum(p * model.dist(x, a).mean for x, p, a in zip(model.labels, model.probs, d) if p > 0))


def gaussian_marginal_median(mu_a: float, sigma_a: float, mu_b: float, sigma_b: float) -> float:
    """Marginal median of an equal-weight mixture of two Gaussians: each mean weighted by the other's sd."""
    return (sigma_b * mu_a + sigma_a * mu_b) / (sigma_a + sigma_b)


# ---------------------------------------------------------------------------
# Optimal policies
# ---------------------------------------------------------------------------


@dataclass
class PolicyTable:
    """Per-label decisions of the mean, marginal-median and ACME optimal policies.

    Indifferent labels carry decision 0 and a True flag.
    """

    labels: tuple[str, ...]
    mean: tuple[int, ...]
    mme: tuple[int, ...]
    acme: tuple[int, ...]
    mean_indifferent: tuple[bool, ...]
    mme_indifferent: tuple[bool, ...]
    acme_indifferent: tuple[bool, ...]
    mme_maximizers: list[tuple[int, ...]]
    mme_value: float

    def decision(self, kind: str, label: str) -> int:
        return getattr(self, kind)[self.labels.index(label)]

    def indifferent(self, kind: str, label: str) -> bool:
        return getattr(self, f"{kind}_indifferent")[self.labels.index(label)]

    def rows(self) -> list[dict]:
        out = []
        for kind in ("mean", "mme", "acme"):
            for i, x in enumerate(self.labels):
                out.append({"policy": kind.upper(), "label": x,
                            "treat": getattr(self, kind)[i],
                            "indifferent": getattr(self, f"{kind}_indifferent")[i]})
        return out


def _compare(hi: float, lo: float) -> tuple[int, bool]:
    if abs(hi - lo) <= TIE_TOL * max(1.0, abs(hi), abs(lo)):
        return 0, True
    return int(hi > lo), False


def optimal_policies(model: DiscreteModel) -> PolicyTable:
    k = len(model.labels)
    if k > MAX_ENUMERATION:
        raise ValueError(f"enumeration is capped at {MAX_ENUMERATION} support labels, got {k}")
    mean = [_compare(model.dist(x, 1).mean, model.dist(x, 0).mean) for x in model.labels]
    acme = [_compare(model.median(x, 1), model.median(x, 0)) for x in model.labels]

    values = {d: marginal_median_value(model, d) for d in itertools.product((0, 1), repeat=k)}
    best = max(values.values())
    tol = TIE_TOL * max(1.0, abs(best))
    maximizers = sorted(d for d, v in values.items() if best - v <= tol)
    mme, mme_flags = [], []
    for i in range(k):
        choices = {d[i] for d in maximizers}
        if len(choices) == 1:
            mme.append(choices.pop())
            mme_flags.append(False)
        else:
            mme.append(0)
            mme_flags.append(True)
    return PolicyTable(
        labels=model.labels,
        mean=tuple(d for d, _ in mean), mme=tuple(mme), acme=tuple(d for d, _ in acme),
        mean_indifferent=tuple(f for _, f in mean), mme_indifferent=tuple(mme_flags),
        acme_indifferent=tuple(f for _, f in acme),
        mme_maximizers=maximizers, mme_value=best,
    )


def prop1_agreement_check(mu1: float, mu0: float, m1: float, m0: float,
                          sd1: float, sd0: float) -> str:
    """``"agrees"`` when both contrasts exceed ``sd1 + sd0`` in magnitude, else ``"not-covered"``.

    Raises ``AssertionError`` if a covered point has mean and median contrasts of opposite sign.
    """
    margin = sd1 + sd0
    if abs(mu1 - mu0) > margin and abs(m1 - m0) > margin:
        if (mu1 > mu0) != (m1 > m0):
            raise AssertionError("mean and median contrasts disagree in sign despite separation")
        return "agrees"
    return "not-covered"


@dataclass
class FlipResult:
    """Outcome of the two-group marginal-median flip condition.

    ``condition[a]`` is True/False, or None when both sides are equal.
    ``predicted`` is the implied marginal-median decision at label 1, or None
    when the arms disagree or a side is indeterminate.
    """

    covered: bool
    lhs: tuple[float, float]
    rhs: float
    condition: tuple[Optional[bool], Optional[bool]]
    predicted: Optional[int]
    enumerated: Optional[int] = None

    @property
    def agrees(self) -> Optional[bool]:
        if self.predicted is None or self.enumerated is None:
            return None
        return self.predicted == self.enumerated


def two_group_gaussian_model(mu: Mapping[tuple[int, int], float],
                             sigma: Mapping[tuple[int, int], float]) -> DiscreteModel:
    """Labels "0", "1" with probability 1/2; ``mu[(x, a)]``, ``sigma[(x, a)]`` give the arms."""
    arms = tuple((Gaussian(mu[(x, 0)], sigma[(x, 0)]), Gaussian(mu[(x, 1)], sigma[(x, 1)])) for x in (0, 1))
    return DiscreteModel(("0", "1"), (0.5, 0.5), arms)


def mme_flip_condition(mu: Mapping[tuple[int, int], float], sigma: Mapping[tuple[int, int], float],
                       verify: bool = True) -> FlipResult:
    """Evaluate, for each arm ``a`` at label 0, whether

    ``(s1(1) - s0(1)) mu_a(0) + (mu1(1) - mu0(1)) s_a(0) > s1(1) mu0(1) - s0(1) mu1(1)``.

    When it holds for both arms, treating label 1 maximises the marginal median;
    when it fails for both, withholding treatment does. With ``verify`` the
    prediction is compared to exhaustive enumeration. Parameters outside the
    hypotheses (``mu1(1) > mu0(1)``, ``s1(1) > s0(1)``,
    ``mu1(1)/mu0(1) < s1(1)/s0(1)``) yield ``covered=False``.
    """
    m11, m01 = mu[(1, 1)], mu[(1, 0)]
    s11, s01 = sigma[(1, 1)], sigma[(1, 0)]
    covered = m11 > m01 and s11 > s01 and m01 != 0 and m11 / m01 < s11 / s01
    rhs = s11 * m01 - s01 * m11
    lhs = tuple((s11 - s01) * mu[(0, a)] + (m11 - m01) * sigma[(0, a)] for a in (0, 1))
    tol = 1e-12 * max(1.0, abs(rhs), *map(abs, lhs))
    cond = tuple(None if abs(l - rhs) <= tol else l > rhs for l in lhs)
    if not covered:
        return FlipResult(False, lhs, rhs, cond, None)
    predicted = None
    if cond[0] is True and cond[1] is True:
        predicted = 1
    elif cond[0] is False and cond[1] is False:
        predicted = 0
    result = FlipResult(True, lhs, rhs, cond, predicted)
    if verify and predicted is not None:
        table = optimal_policies(two_group_gaussian_model(mu, sigma))
        result.enumerated = None if table.mme_indifferent[1] else table.mme[1]
    return result


# ---------------------------------------------------------------------------
# First-order expansion check
# ---------------------------------------------------------------------------


@dataclass
class RemainderReport:
    lhs: float
    eif_term: float
    remainder: float
    residual: float
    remainder_second_order: float
    second_order_gap: float


def _xi_mean(model_P: DiscreteModel, model_Q: DiscreteModel, d: Sequence[int]) -> float:
    """``E_P[xi_d(Z; Q)]``: influence values built from ``Q``, integrated under ``P``."""
    total = 0.0
    for x, p, a_d in zip(model_P.labels, model_P.probs, d):
        if p == 0:
            continue
        pi_P, pi_Q = model_P.pi(x), model_Q.pi(x)
        mq = model_Q.median(x, a_d)
        fq = model_Q.density_at_median(x, a_d)
        F = float(model_P.dist(x, a_d).cdf(mq))
        weight = pi_P / pi_Q if a_d == 1 else (1 - pi_P) / (1 - pi_Q)
        total += p * (weight * (0.5 - F) / fq + mq)
    return total


def von_mises_check(P: DiscreteModel, Pbar: DiscreteModel, policy) -> RemainderReport:
    """Compare ``psi(Pbar) - psi(P)`` with the influence-function term plus the exact remainder.

    The second-order remainder form needs the density derivative at an unknown
    intermediate point; it is evaluated at the midpoint of the two medians, so
    ``second_order_gap`` is third order in the perturbation.
    """
    if P.labels != Pbar.labels:
        raise ValueError("models must share support labels")
    d = P.policy_vector(policy)
    psi_P, psi_Q = acme_value(P, d), acme_value(Pbar, d)
    lhs = psi_Q - psi_P
    eif_term = _xi_mean(Pbar, Pbar, d) - _xi_mean(P, Pbar, d)

    remainder = 0.0
    second = 0.0
    for x, p, a in zip(P.labels, P.probs, d):
        if p == 0:
            continue
        dist = P.dist(x, a)
        m, mbar = P.median(x, a), Pbar.median(x, a)
        fbar = Pbar.density_at_median(x, a)
        pi, pibar = P.pi(x), Pbar.pi(x)
        ratio = pi / pibar if a == 1 else (1 - pi) / (1 - pibar)
        diff_F = float(dist.cdf(mbar)) - float(dist.cdf(m))
        remainder += p * (mbar - m - ratio * diff_F / fbar)

        f = float(dist.pdf(m))
        fprime = float(dist.pdf_derivative(0.5 * (m + mbar)))
        delta = mbar - m
        if a == 1:
            bracket = (pibar - pi) * fbar + (fbar - f) * pi - delta * fprime * pi / 2
            second += p * delta / (pibar * fbar) * bracket
        else:
            bracket = (fbar - f) + (pi - pibar) * fbar + (f - fbar) * pi - delta * fprime * (1 - pi) / 2
            second += p * delta / ((1 - pibar) * fbar) * bracket
    return RemainderReport(lhs, eif_term, remainder, lhs - eif_term - remainder, second, remainder - second)


# ---------------------------------------------------------------------------
# Illustration models
# ---------------------------------------------------------------------------

CASE_I_MIXTURE = Mixture.of((0.2, 22.0, 1.0), (0.8, -5.0, 1.0))


def case_one() -> DiscreteModel:
    """Two groups; no effect in G1 (N(9, 1)), G2 goes from N(0, 1) to a skewed mixture under treatment."""
    g1 = Gaussian(9.0, 1.0)
    return DiscreteModel(("G1", "G2"), (0.5, 0.5), ((g1, g1), (Gaussian(0.0, 1.0), CASE_I_MIXTURE)))


def case_two() -> DiscreteModel:
    """Case I with G1's outcome distribution replaced by N(-4, 2) under both arms."""
    g1 = Gaussian(-4.0, 2.0)
    return case_one().replace("G1", g1, g1)
