import itertools
import json
import math

import numpy as np
import pytest

import oracles

from acme_otr.analytic import (
    DiscreteModel,
    Gaussian,
    Mixture,
    ModelError,
    acme_value,
    bisect_increasing,
    case_one,
    case_two,
    centred_cdf,
    conditional_median,
    gaussian_marginal_median,
    marginal_median_value,
    mean_value,
    mme_flip_condition,
    optimal_policies,
    prop1_agreement_check,
    two_group_gaussian_model,
    von_mises_check,
)
from acme_otr.estimator import analytic_variance_bound


def gauss_model(mu, sigma):
    """Two-group model from ``{(x, a): value}`` dicts."""
    return two_group_gaussian_model(mu, sigma)


class TestMedians:
    def test_gaussian(self):
        assert conditional_median(case_one(), "G1", 0) == 9.0

    def test_case_one_mixture(self):
        m = conditional_median(case_one(), "G2", 1)
        assert m == pytest.approx(oracles.CASE1_G2_TREATED_MEDIAN, abs=1e-9)
        assert m == pytest.approx(-5 + 0.3186393639643752, abs=1e-3)  # -5 + Phi^-1(0.625)

    def test_symmetric_mixture(self):
        assert Mixture.of((0.5, -1, 1), (0.5, 1, 1)).median() == pytest.approx(0.0, abs=1e-10)

    def test_bisection_residual(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(1, 5))
            w = rng.dirichlet(np.ones(k))
            mix = Mixture.of(*[(float(wi), rng.uniform(-20, 20), rng.uniform(0.1, 4)) for wi in w])
            assert abs(float(mix.cdf(mix.median())) - 0.5) <= 1e-10

    def test_bisect_rejects_bad_bracket(self):
        with pytest.raises(ValueError, match="straddle"):
            bisect_increasing(lambda v: v, 0.5, 1.0, 2.0)

    def test_centred_cdf_far_apart(self):
        fn = centred_cdf([(0.5, Gaussian(-3, 0.1)), (0.5, Gaussian(3, 0.1))])
        assert fn(-1.0) < 0 < fn(1.0)


class TestMarginalMedian:
    def test_sd_weighted_average(self):
        model = gauss_model({(0, 0): 0, (0, 1): 0, (1, 0): 2, (1, 1): 0},
                            {(0, 0): 1, (0, 1): 1, (1, 0): 3, (1, 1): 1})
        assert marginal_median_value(model, (0, 0)) == pytest.approx(0.5, abs=1e-10)
        assert gaussian_marginal_median(0, 1, 2, 3) == 0.5

    def test_equal_variance_midpoint(self):
        model = gauss_model({(0, 0): -3, (0, 1): 0, (1, 0): 7, (1, 1): 0},
                            {(0, 0): 2, (0, 1): 1, (1, 0): 2, (1, 1): 1})
        assert marginal_median_value(model, (0, 0)) == pytest.approx(2.0, abs=1e-10)

    @pytest.mark.parametrize("model, policy, expected", [
        (case_one(), (0, 1), oracles.CASE1_MARGINAL_TREAT_G2),
        (case_one(), (0, 0), oracles.CASE1_MARGINAL_NO_TREAT),
        (case_two(), (0, 1), oracles.CASE2_MARGINAL_TREAT_G2),
        (case_two(), (0, 0), oracles.CASE2_MARGINAL_NO_TREAT),
    ])
    def test_cases(self, model, policy, expected):
        assert marginal_median_value(model, policy) == pytest.approx(expected, abs=1e-9)

    def test_equal_sigma_marginal_equals_acme(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = rng.uniform(0.5, 3)
            mu = {(x, a): rng.uniform(-5, 5) for x in (0, 1) for a in (0, 1)}
            model = gauss_model(mu, {k: s for k in mu})
            for d in itertools.product((0, 1), repeat=2):
                assert marginal_median_value(model, d) == pytest.approx(acme_value(model, d), abs=1e-9)


class TestValues:
    def test_case_one(self):
        c1 = case_one()
        assert acme_value(c1, (0, 0)) == 4.5
        assert acme_value(c1, (0, 1)) == pytest.approx(0.5 * 9 + 0.5 * oracles.CASE1_G2_TREATED_MEDIAN)
        assert mean_value(c1, (0, 1)) == pytest.approx(0.5 * 9 + 0.5 * 0.4)

    def test_zero_probability_label(self):
        g, h = Gaussian(0, 1), Gaussian(5, 1)
        model = DiscreteModel(("a", "b"), (1.0, 0.0), ((g, h), (g, h)))
        assert acme_value(model, (1, 0)) == acme_value(model, (1, 1))

    def test_policy_forms(self):
        c1 = case_one()
        assert c1.policy_vector({"G1": 0, "G2": 1}) == (0, 1)
        assert c1.policy_vector(lambda x: int(x == "G2")) == (0, 1)
        with pytest.raises(ValueError):
            c1.policy_vector((1,))


class TestOptimalPolicies:
    def test_case_one(self):
        t = optimal_policies(case_one())
        assert (t.decision("mean", "G2"), t.decision("mme", "G2"), t.decision("acme", "G2")) == (1, 1, 0)
        assert t.indifferent("acme", "G1") and t.indifferent("mean", "G1") and t.indifferent("mme", "G1")
        assert len(t.mme_maximizers) == 2

    def test_case_two(self):
        t = optimal_policies(case_two())
        assert (t.decision("mean", "G2"), t.decision("mme", "G2"), t.decision("acme", "G2")) == (1, 0, 0)

    def test_identical_arms(self):
        g = Gaussian(1, 2)
        model = DiscreteModel(("only",), (1.0,), ((g, g),))
        t = optimal_policies(model)
        assert t.mean == t.mme == t.acme == (0,)
        assert all(r["indifferent"] for r in t.rows())

    def test_enumeration_cap(self):
        g = Gaussian(0, 1)
        model = DiscreteModel(tuple(str(i) for i in range(21)), tuple([1 / 21] * 20 + [1 - 20 / 21]),
                              tuple((g, g) for _ in range(21)))
        with pytest.raises(ValueError, match="capped"):
            optimal_policies(model)


class TestMeanMedianAgreement:
    def test_separated(self):
        assert prop1_agreement_check(5, 0, 5, 0, 1, 1) == "agrees"

    def test_not_separated(self):
        assert prop1_agreement_check(1, 0, 1, 0, 1.5, 1.5) == "not-covered"

    def test_case_one_g2(self):
        c1 = case_one()
        mix = c1.dist("G2", 1)
        mu1, mu0 = mix.mean, 0.0
        m1, m0 = c1.median("G2", 1), 0.0
        assert mu1 == pytest.approx(0.4)
        assert m1 - m0 == pytest.approx(-4.68, abs=0.01)
        assert prop1_agreement_check(mu1, mu0, m1, m0, mix.sd, 1.0) == "not-covered"
        assert (mu1 > mu0) != (m1 > m0)

    def test_violation_raises(self):
        with pytest.raises(AssertionError):
            prop1_agreement_check(5, 0, -5, 0, 1, 1)


def flip_params(mu0a, s0a):
    mu = {(1, 1): 2.0, (1, 0): 1.0, (0, 0): mu0a, (0, 1): mu0a}
    sigma = {(1, 1): 4.0, (1, 0): 1.0, (0, 0): s0a, (0, 1): s0a}
    return mu, sigma


class TestFlipCondition:
    def test_treats(self):
        res = mme_flip_condition(*flip_params(10.0, 1.0))
        assert res.lhs == (31.0, 31.0) and res.rhs == 2.0
        assert res.predicted == 1 and res.agrees

    def test_withholds(self):
        res = mme_flip_condition(*flip_params(-10.0, 0.1))
        assert res.lhs[0] == pytest.approx(-29.9)
        assert res.predicted == 0 and res.agrees

    def test_boundary_indeterminate(self):
        # 3 mu + 1 * s = 2 with s = 0.5
        res = mme_flip_condition(*flip_params(0.5, 0.5))
        assert res.condition == (None, None) and res.predicted is None and res.agrees is None

    def test_outside_hypotheses(self):
        mu, sigma = flip_params(1.0, 1.0)
        sigma[(1, 1)] = 1.5  # ratio 2 > 1.5
        assert not mme_flip_condition(mu, sigma).covered


def shifted_case_one(shift):
    c1 = case_one()
    mix = c1.dist("G2", 1)
    return c1.replace("G2", arm1=Mixture(mix.weights, tuple(Gaussian(g.mu + shift, g.sigma) for g in mix.parts)))


class TestVonMises:
    def test_identical(self):
        rep = von_mises_check(case_one(), case_one(), (0, 1))
        assert (rep.lhs, rep.eif_term, rep.remainder, rep.residual) == (0.0, 0.0, 0.0, 0.0)

    def test_propensity_only(self):
        P = case_one()
        Pbar = DiscreteModel(P.labels, P.probs, P.arms, (0.3, 0.8))
        rep = von_mises_check(P, Pbar, (1, 1))
        assert rep.remainder == 0.0 and abs(rep.residual) <= 1e-12

    def test_case_one_shift(self):
        reps = [von_mises_check(case_one(), shifted_case_one(s), (0, 1)) for s in (0.1, 0.05)]
        assert all(abs(r.residual) <= 1e-8 for r in reps)
        assert 3.5 <= reps[0].remainder / reps[1].remainder <= 4.5
        # the midpoint second-order form is accurate to third order
        assert abs(reps[1].second_order_gap) <= 1e-6 + abs(reps[1].remainder) * 0.05

    def test_mismatched_support(self):
        other = DiscreteModel(("a", "b"), (0.5, 0.5), case_one().arms)
        with pytest.raises(ValueError, match="support"):
            von_mises_check(case_one(), other, (0, 0))


class TestDiscreteBound:
    def test_enumeration_matches_manual(self):
        P = case_one()
        d = (0, 1)
        f = [P.density_at_median(x, a) for x, a in zip(P.labels, d)]
        m = [P.median(x, a) for x, a in zip(P.labels, d)]
        first = 0.5 * (1 / (4 * 0.5 * f[0] ** 2)) + 0.5 * (1 / (4 * 0.5 * f[1] ** 2))
        var = 0.25 * (m[0] - m[1]) ** 2
        assert analytic_variance_bound(P, d) == pytest.approx(first + var)


class TestJson:
    def test_round_trip(self):
        c1 = case_one()
        again = DiscreteModel.from_json(json.dumps(c1.to_json()))
        assert again.to_json() == c1.to_json()

    @pytest.mark.parametrize("doc, pointer", [
        ({}, ""),
        ({"support": []}, "/support"),
        ({"support": [{"label": "a", "p": 1.0, "arm0": {"type": "gaussian", "mu": 0, "sigma": 1}}]}, "/support/0/arm1"),
        ({"support": [{"label": "a", "p": 1.0, "arm0": {"type": "gaussian", "mu": 0, "sigma": -1},
                       "arm1": {"type": "gaussian", "mu": 0, "sigma": 1}}]}, "/support/0/arm0/sigma"),
        ({"support": [{"label": "a", "p": 0.7, "arm0": {"type": "gaussian", "mu": 0, "sigma": 1},
                       "arm1": {"type": "gaussian", "mu": 0, "sigma": 1}}]}, "/support"),
        ({"support": [{"label": "a", "p": 1.0, "arm0": {"type": "gaussian", "mu": 0, "sigma": 1},
                       "arm1": {"type": "mixture", "components": [{"w": 0.5, "mu": 0, "sigma": 1}]}}]},
         "/support/0/arm1/components"),
        ({"support": [{"label": "a", "p": 1.0, "arm0": {"type": "cauchy"},
                       "arm1": {"type": "gaussian", "mu": 0, "sigma": 1}}]}, "/support/0/arm0/type"),
    ])
    def test_errors_carry_pointer(self, doc, pointer):
        with pytest.raises(ModelError) as err:
            DiscreteModel.from_json(doc)
        assert err.value.pointer == pointer

    def test_invalid_probabilities(self):
        g = Gaussian(0, 1)
        with pytest.raises(ValueError):
            DiscreteModel(("a",), (0.5,), ((g, g),))
        with pytest.raises(ValueError):
            Mixture.of((0.5, 0, 1), (0.6, 1, 1))
        with pytest.raises(ValueError):
            Gaussian(0, 0)


def test_gaussian_closed_form_is_exact():
    rng = np.random.default_rng(2)
    for _ in range(50):
        ma, mb = rng.uniform(-10, 10, 2)
        sa, sb = rng.uniform(0.1, 5, 2)
        m = gaussian_marginal_median(ma, sa, mb, sb)
        assert math.isclose((m - ma) / sa, -(m - mb) / sb, rel_tol=1e-12, abs_tol=1e-12)
