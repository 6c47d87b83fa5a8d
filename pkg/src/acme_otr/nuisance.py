"""Nuisance learners: propensity, conditional median, density at the median, conditional mean.

All fitters return plain callables ``X -> array`` that close over immutable
fitted state, so they are safe to evaluate concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.special import expit

from .core import EPS_CLIP, F_MIN, Dataset, Evaluator, _as_matrix

SQRT_2PI = math.sqrt(2 * math.pi)
MEDIAN_SMOOTHING = 1e-6


class ConvergenceError(RuntimeError):
    """An iterative fit stopped before meeting its tolerance."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def gaussian_kernel(u: ArrayLike) -> NDArray:
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) / SQRT_2PI


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with a fixed bandwidth, or Silverman's rule when ``bandwidth`` is None."""

    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def resolve(self, residuals: ArrayLike) -> float:
        if self.bandwidth is not None:
            return float(self.bandwidth)
        return silverman_bandwidth(residuals)


@dataclass(frozen=True)
class FitConfig:
    """Learner choices for the nuisance functions.

    median_method : "linear_quantile" or "knn"
    propensity : "logistic", a constant in (0, 1), or a callable evaluator
    density_method : "knn" or "nadaraya_watson"
    density_k : neighbours for the density regression; None means ceil(n^(4/5))
    mean_method : "linear" or "knn"
    """

    median_method: str = "linear_quantile"
    median_k: int = 50
    propensity: Union[str, float, Callable] = "logistic"
    density_method: str = "knn"
    density_k: Optional[int] = None
    density_bandwidth_x: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    mean_method: str = "linear"
    mean_k: int = 50
    tol: float = 1e-8
    max_iter: int = 500
    eps_clip: float = EPS_CLIP
    f_min: float = F_MIN

    def __post_init__(self):
        if self.median_method not in ("linear_quantile", "knn"):
            raise ValueError(f"unknown median method {self.median_method!r}")
        if self.density_method not in ("knn", "nadaraya_watson"):
            raise ValueError(f"unknown density regressor {self.density_method!r}")
        if self.mean_method not in ("linear", "knn"):
            raise ValueError(f"unknown mean method {self.mean_method!r}")
        for name in ("median_k", "mean_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.density_k is not None and self.density_k < 1:
            raise ValueError("density_k must be >= 1")
        if not (self.tol > 0 and self.max_iter > 0):
            raise ValueError("tolerances must be positive")
        if isinstance(self.propensity, str) and self.propensity != "logistic":
            raise ValueError(f"unknown propensity method {self.propensity!r}")
        if isinstance(self.propensity, (int, float)) and not 0 < self.propensity < 1:
            raise ValueError("a known propensity must lie in (0, 1)")

    def to_dict(self) -> dict:
        prop = self.propensity
        return {
            "median_method": self.median_method,
            "median_k": self.median_k,
            "propensity": prop if isinstance(prop, (str, int, float)) else "callable",
            "density_method": self.density_method,
            "density_k": self.density_k,
            "density_bandwidth_x": self.density_bandwidth_x,
            "bandwidth": self.kernel.bandwidth if self.kernel.bandwidth is not None else "silverman",
            "mean_method": self.mean_method,
            "mean_k": self.mean_k,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "eps_clip": self.eps_clip,
            "f_min": self.f_min,
        }


def _design(X: NDArray) -> NDArray:
    return np.column_stack([np.ones(X.shape[0]), X])


def _linear_evaluator(coef: NDArray) -> Evaluator:
    coef = coef.copy()
    coef.setflags(write=False)

    def evaluate(X):
        return _design(_as_matrix(X)) @ coef

    evaluate.coef = coef
    return evaluate


def _constant(value: float) -> Evaluator:
    def evaluate(X):
        return np.full(_as_matrix(X).shape[0], value)

    evaluate.value = value
    return evaluate


# ---------------------------------------------------------------------------
# Propensity
# ---------------------------------------------------------------------------


def logistic_mle(X: NDArray, a: NDArray, tol: float = 1e-8, max_iter: int = 500):
    """Newton-Raphson for the Bernoulli log-likelihood of ``expit(b0 + b'x)``.

    Steps are halved until the log-likelihood does not decrease, so the
    returned trace is monotone. Convergence means the gradient of the mean
    log-likelihood has Euclidean norm <= ``tol``.

    Returns ``(coef, loglik_trace)``.
    """
    Z = _design(X)
    n = Z.shape[0]
    coef = np.zeros(Z.shape[1])

    def loglik(b):
        eta = Z @ b
        return float(np.sum(a * eta - np.logaddexp(0.0, eta)) / n)

    ll = loglik(coef)
    trace = [ll]
    grad_norm = np.inf
    for _ in range(max_iter):
        p = expit(Z @ coef)
        grad = Z.T @ (a - p) / n
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            return coef, trace
        W = p * (1 - p)
        H = (Z * W[:, None]).T @ Z / n
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = coef + t * step
            cand_ll = loglik(cand)
            if cand_ll >= ll or t < 1e-12:
                break
            t /= 2
        if cand_ll < ll:
            break
        coef, ll = cand, cand_ll
        trace.append(ll)
    p = expit(Z @ coef)
    grad_norm = float(np.linalg.norm(Z.T @ (a - p) / n))
    if grad_norm <= tol:
        return coef, trace
    raise ConvergenceError("logistic regression did not converge", grad_norm)


def fit_propensity(data: Dataset, cfg: FitConfig = FitConfig()) -> Evaluator:
    """Propensity score evaluator, clipped to ``[eps_clip, 1 - eps_clip]``."""
    lo, hi = cfg.eps_clip, 1 - cfg.eps_clip
    prop = cfg.propensity
    if callable(prop):
        def known(X):
            return np.clip(np.asarray(prop(_as_matrix(X)), dtype=float), lo, hi)
        return known
    if not isinstance(prop, str):
        return _constant(float(np.clip(prop, lo, hi)))

    if np.all(data.a == data.a[0]):
        raise ValueError("logistic propensity needs both treatment arms in the training data")
    coef, _ = logistic_mle(data.X, data.a, tol=cfg.tol, max_iter=cfg.max_iter)
    coef.setflags(write=False)

    def evaluate(X):
        return np.clip(expit(_design(_as_matrix(X)) @ coef), lo, hi)

    evaluate.coef = coef
    return evaluate


# ---------------------------------------------------------------------------
# Conditional median
# ---------------------------------------------------------------------------


def pinball_loss(residuals: ArrayLike, tau: float = 0.5) -> float:
    r = np.asarray(residuals, dtype=float)
    return float(np.mean(np.where(r >= 0, tau * r, (tau - 1) * r)))


def median_regression(X: NDArray, y: NDArray, tol: float = 1e-8, max_iter: int = 500,
                      smoothing: float = MEDIAN_SMOOTHING) -> NDArray:
    """Linear median regression by iteratively reweighted least squares.

    Weights are ``1 / max(|r|, smoothing)``; iteration stops once the relative
    decrease of the mean absolute residual drops below ``tol``.
    """
    Z = _design(X)
    coef = np.linalg.lstsq(Z, y, rcond=None)[0]
    prev = np.mean(np.abs(y - Z @ coef))
    for _ in range(max_iter):
        r = y - Z @ coef
        sw = 1.0 / np.sqrt(np.maximum(np.abs(r), smoothing))
        cand = np.linalg.lstsq(Z * sw[:, None], y * sw, rcond=None)[0]
        cur = np.mean(np.abs(y - Z @ cand))
        if cur > prev:
            break
        coef = cand
        if prev - cur <= tol * max(1.0, prev):
            break
        prev = cur
    return coef


class _Knn:
    """Euclidean k-nearest-neighbour lookup over a fixed training set."""

    def __init__(self, X: NDArray, k: int):
        self.tree = cKDTree(X)
        self.n = X.shape[0]
        self.k = min(k, self.n)

    def neighbours(self, X: NDArray) -> NDArray:
        X = _as_matrix(X)
        if X.shape[1] != self.tree.m:
            raise ValueError(f"expected {self.tree.m} covariates, got {X.shape[1]}")
        if self.k == self.n:
            return np.broadcast_to(np.arange(self.n), (X.shape[0], self.n))
        _, idx = self.tree.query(X, k=self.k)
        return idx.reshape(X.shape[0], self.k)


def fit_conditional_median(data: Dataset, arm: int, cfg: FitConfig = FitConfig()) -> Evaluator:
    """Conditional median of ``y`` given ``x`` among rows with treatment ``arm``."""
    sub = data.arm(arm)
    if cfg.median_method == "linear_quantile":
        coef = median_regression(sub.X, sub.y, tol=cfg.tol, max_iter=cfg.max_iter)
        return _linear_evaluator(coef)

    knn = _Knn(sub.X, cfg.median_k)
    y = sub.y

    def evaluate(X):
        return np.median(y[knn.neighbours(X)], axis=1)

    return evaluate


# ---------------------------------------------------------------------------
# Density at the conditional median
# ---------------------------------------------------------------------------


def silverman_bandwidth(residuals: ArrayLike) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``; falls back to ``sd`` when the IQR is zero."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 2 or np.all(r == r[0]):
        raise ValueError("bandwidth is undefined for fewer than two distinct values")
    sd = float(np.std(r, ddof=1))
    q75, q25 = np.percentile(r, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * r.size ** (-0.2)


def density_targets(y: NDArray, centre: NDArray, h: float) -> NDArray:
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    return gaussian_kernel((np.asarray(y) - np.asarray(centre)) / h) / h


def _regress(X: NDArray, t: NDArray, method: str, k: Optional[int], bw_x: float) -> Evaluator:
    n = X.shape[0]
    if method == "knn":
        k = math.ceil(n ** 0.8) if k is None else k
        knn = _Knn(X, k)

        def evaluate(Xq):
            return t[knn.neighbours(Xq)].mean(axis=1)

        return evaluate

    if not bw_x > 0:
        raise ValueError("covariate bandwidth must be positive")
    Xt = X.copy()
    fallback = float(t.mean())

    sq_train = (Xt ** 2).sum(axis=1)

    def evaluate(Xq):
        Xq = _as_matrix(Xq)
        out = np.full(Xq.shape[0], fallback)
        # blocks keep the weight matrix near 2**22 entries
        step = max(1, 2 ** 22 // max(n, 1))
        for s in range(0, Xq.shape[0], step):
            q = Xq[s:s + step]
            d2 = np.maximum((q ** 2).sum(axis=1)[:, None] + sq_train[None, :] - 2 * q @ Xt.T, 0.0)
            w = np.exp(-0.5 * d2 / bw_x ** 2)
            tot = w.sum(axis=1)
            ok = tot > 0
            out[s:s + step][ok] = (w[ok] @ t) / tot[ok]
        return out

    return evaluate


def fit_density_at_median(data: Dataset, arm: int, median_model: Evaluator,
                          kernel: KernelSpec = KernelSpec(),
                          cfg: FitConfig = FitConfig()) -> Evaluator:
    """Estimate ``f_a(m_a(x) | x)`` by regressing kernel-smoothed residual targets on ``x``.

    Targets are ``K((y - m(x)) / h) / h`` on the arm subsample. The fitted
    evaluator is floored at ``cfg.f_min``. If every residual is zero up to
    rounding (a point mass at the median, where Silverman's rule is undefined)
    the density is infinite and the evaluator returns ``inf``.
    """
    sub = data.arm(arm)
    resid = sub.y - np.asarray(median_model(sub.X), dtype=float)
    scale = max(1.0, float(np.max(np.abs(sub.y))))
    if kernel.bandwidth is None and np.max(np.abs(resid)) <= 1e-9 * scale:
        def point_mass(X):
            return np.full(_as_matrix(X).shape[0], np.inf)
        return point_mass
    h = kernel.resolve(resid)
    t = density_targets(sub.y, sub.y - resid, h)
    reg = _regress(sub.X, t, cfg.density_method, cfg.density_k, cfg.density_bandwidth_x)
    f_min = cfg.f_min

    def evaluate(X):
        return np.maximum(reg(X), f_min)

    evaluate.bandwidth = h
    return evaluate


# ---------------------------------------------------------------------------
# Conditional mean
# ---------------------------------------------------------------------------


def fit_conditional_mean(data: Dataset, arm: int, cfg: FitConfig = FitConfig()) -> Evaluator:
    sub = data.arm(arm)
    if cfg.mean_method == "linear":
        coef = np.linalg.lstsq(_design(sub.X), sub.y, rcond=None)[0]
        return _linear_evaluator(coef)
    knn = _Knn(sub.X, cfg.mean_k)
    y = sub.y

    def evaluate(X):
        return y[knn.neighbours(X)].mean(axis=1)

    return evaluate
