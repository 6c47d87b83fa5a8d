"""Reference values computed independently of the package (scipy root finding and closed forms)."""

import math

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

E = math.e

# frozen expected values
CASE1_G2_TREATED_MEDIAN = -4.681360636035578
CASE1_MARGINAL_TREAT_G2 = 8.158378766427745  # 9 + Phi^-1(0.2); quoted elsewhere as 8.157
CASE1_MARGINAL_NO_TREAT = 4.5
CASE2_MARGINAL_TREAT_G2 = -4.402893759870437
CASE2_MARGINAL_NO_TREAT = -4.0 / 3.0
LOGNORMAL_THRESHOLD_VALUE = 2.2051822713
LOGNORMAL_OPTIMAL_VALUE = 3.0041660239464334  # e^1.1
SILVERMAN_ZERO_ONE = 0.9 * 0.5 / 1.34 * 2 ** -0.2


def mixture_cdf(components):
    """``components`` = [(w, mu, sigma), ...]."""
    return lambda m: sum(w * norm.cdf(m, mu, s) for w, mu, s in components)


def median_oracle(cdf, lo=-200.0, hi=200.0):
    return brentq(lambda m: cdf(m) - 0.5, lo, hi, xtol=1e-13, rtol=1e-15)


def marginal_median_oracle(groups):
    """``groups`` = [(p, components), ...] with components as in :func:`mixture_cdf`."""
    cdfs = [(p, mixture_cdf(c)) for p, c in groups]
    return median_oracle(lambda m: sum(p * f(m) for p, f in cdfs))


CASE1_MIX = [(0.2, 22.0, 1.0), (0.8, -5.0, 1.0)]


def lognormal_threshold_value():
    """ACME of 1{x1 > 0} under beta = 0.2 * ones(5)."""
    return math.exp(0.1) * (E * norm.cdf(0.2) + norm.cdf(-0.2))


def _half_mgf(k, sign=1):
    # E[1{sign * x1 > 0} exp(k x'beta)] with x'beta ~ N(0, 0.2) and x1 loading 0.2
    return math.exp(0.1 * k * k) * norm.cdf(sign * 0.2 * k)


def lognormal_threshold_bound(scale=0.25):
    """Closed-form efficiency bound for 1{x1 > 0} on the lognormal model."""
    c = math.pi * scale ** 2 / 2
    treated = E ** 2 * (_half_mgf(2) + _half_mgf(1))
    control = _half_mgf(2, -1) + _half_mgf(3, -1)
    second_moment = E ** 2 * _half_mgf(2) + _half_mgf(2, -1)
    psi = lognormal_threshold_value()
    return c * (treated + control) + second_moment - psi ** 2


def mc_xi_variance(n, seed, scale=0.25):
    """Sample variance of the uncentred influence values for 1{x1 > 0} with true nuisances, written out longhand."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 5))
    t = X.sum(axis=1) * 0.2
    pi = 1 / (1 + np.exp(-t))
    a = (rng.random(n) < pi).astype(int)
    y = np.exp(t + a + scale * rng.standard_normal(n))
    d = (X[:, 0] > 0).astype(int)
    m = np.exp(t + a)
    f = 1 / (m * scale * math.sqrt(2 * math.pi))
    p = np.where(a == 1, pi, 1 - pi)
    xi = (a == d) / p * (0.5 - (y <= m)) / f + np.exp(t + d)
    return xi.var(ddof=1)
