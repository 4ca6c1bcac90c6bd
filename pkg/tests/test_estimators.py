import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.special import expit

from conftest import make_dataset
from oracles import (aipw_transcription, fluctuation_epsilon, normal_quantile,
                     plugin_double_loop)
from sitmle.data import OutcomeScale, Sample, exposure_summary
from sitmle.estimators import (EstimatorOptions, InterventionWarning, aipw, aipw_from_fits,
                               clever_covariate, contrast_from_fits, direct_effect,
                               fit_nuisance, fluctuate, overall_effect_contrast, plugin_mean,
                               target, tmle, tmle_from_fits, variance_conditional,
                               variance_population, wald_ci)
from sitmle.glm import fit_glm, parse_formula
from sitmle.interventions import (AllControl, AllTreat, Bernoulli, CompleteRandomization,
                                  ExplicitMarginals, RankTopS, marginalize)

Q_FULL = parse_formula("y ~ 1 + w + a + w:a")
Q_INTERCEPT = parse_formula("y ~ 1")
G_LOGIT = parse_formula("a ~ 1 + w", "propensity")
RULES = [AllTreat(), AllControl(), CompleteRandomization(), RankTopS("w"), Bernoulli(0.4)]


def individual_marginals(n, rule):
    s = Sample(np.zeros((n, 1)), [0, 1] * (n // 2), np.zeros(n))
    return marginalize(rule, s, exposure_summary(s))


# -- clever covariate -------------------------------------------------------

def test_clever_covariate_all_treat():
    s = Sample(np.zeros((4, 1)), [1, 0, 1, 0], np.zeros(4))
    m = marginalize(AllTreat(), s, exposure_summary(s))
    np.testing.assert_array_equal(clever_covariate(m, np.full(4, 0.5), s), [2, 0, 2, 0])


def test_clever_covariate_identity_case(sample20):
    g1 = expit(0.3 * sample20.covariates[:, 0])
    m = marginalize(ExplicitMarginals(g1), sample20, exposure_summary(sample20))
    np.testing.assert_allclose(clever_covariate(m, g1, sample20), 1.0, atol=1e-15)


def test_clever_covariate_rank_rule(sample20):
    g_fit = fit_glm(sample20, G_LOGIT)
    m = marginalize(RankTopS("w"), sample20, exposure_summary(sample20))
    h = clever_covariate(m, g_fit, sample20)
    a = sample20.exposure
    agree = m.probs_treat == a
    g1 = expit(g_fit.coefficients[0] + g_fit.coefficients[1] * sample20.covariates[:, 0])
    g_obs = np.where(a == 1, g1, 1 - g1)
    np.testing.assert_array_equal(h[~agree], 0.0)
    np.testing.assert_allclose(h[agree], 1 / np.clip(g_obs[agree], 0.005, 0.995), rtol=1e-12)


def test_clever_covariate_truncation():
    s = Sample(np.zeros((2, 1)), [1, 0], np.zeros(2))
    m = marginalize(AllTreat(), s, exposure_summary(s))
    np.testing.assert_allclose(clever_covariate(m, np.array([1e-4, 0.5]), s), [200.0, 0.0])


def test_clever_covariate_needs_propensity(sample20):
    scaled = sample20.with_outcome((sample20.outcome - sample20.outcome.min())
                                   / np.ptp(sample20.outcome))
    q = fit_glm(scaled, Q_FULL)
    m = marginalize(AllTreat(), sample20, exposure_summary(sample20))
    with pytest.raises(ValueError, match="propensity"):
        clever_covariate(m, q, sample20)


# -- fluctuation ------------------------------------------------------------

def test_fluctuate_already_solved():
    q = np.array([0.2, 0.4, 0.6, 0.8])
    y = np.array([0.3, 0.3, 0.7, 0.7])
    h = np.ones(4)  # sum of residuals is zero
    eps, q_star = fluctuate(q, h, y)
    assert abs(eps) < 1e-12
    np.testing.assert_allclose(q_star, q, atol=1e-12)


def test_fluctuate_zero_covariate():
    q = np.array([0.2, 0.9])
    eps, q_star = fluctuate(q, np.zeros(2), np.array([1.0, 0.0]))
    assert eps == 0.0
    np.testing.assert_allclose(q_star, q)


FIXED_Q = [0.31, 0.55, 0.72, 0.18, 0.64, 0.47, 0.83, 0.25, 0.59, 0.40]
FIXED_H = [1.8, 0.0, 2.4, 1.1, 0.0, 1.6, 3.2, 0.0, 1.3, 2.0]
FIXED_Y = [0.0, 1.0, 1.0, 0.0, 0.2, 1.0, 0.7, 0.0, 1.0, 0.9]


def test_fluctuate_matches_oracle():
    eps, q_star = fluctuate(np.array(FIXED_Q), np.array(FIXED_H), np.array(FIXED_Y))
    assert eps == pytest.approx(fluctuation_epsilon(FIXED_Q, FIXED_H, FIXED_Y), abs=1e-7)
    assert abs(np.sum(np.array(FIXED_H) * (np.array(FIXED_Y) - q_star))) <= 1e-8


def test_fluctuate_clamps_extreme_predictions():
    eps, q_star = fluctuate(np.array([0.0, 1.0, 0.5]), np.ones(3), np.array([0.0, 1.0, 0.5]))
    assert np.all(np.isfinite(q_star)) and abs(eps) < 1e-6


# -- plug-in and estimators -------------------------------------------------

def test_constant_q_gives_constant():
    q = np.full(5, 0.37)
    for p in (np.zeros(5), np.ones(5), np.linspace(0, 1, 5)):
        assert plugin_mean(q, q, p) == pytest.approx(0.37, abs=1e-15)


def test_n4_toy_all_treat():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    s = Sample(np.column_stack([w, (w > 2).astype(float)]), [0, 1, 0, 1], [0, 1, 0, 1],
               ("w", "h"))
    q_spec = parse_formula("y ~ 1 + h + a + h:a [identity]")
    g_spec = parse_formula("a ~ 1 + h", "propensity")
    fits = fit_nuisance(s, None, q_spec, g_spec)
    # saturated fit: Q(w, a) = a in every cell of the split
    np.testing.assert_allclose(fits.q1, 1.0, atol=1e-12)
    np.testing.assert_allclose(fits.q0, 0.0, atol=1e-12)
    oracle = plugin_double_loop(list(fits.q0), list(fits.q1), [1.0] * 4)
    res = tmle_from_fits(fits, AllTreat())
    assert res.psi == pytest.approx(oracle, abs=1e-10)
    assert res.psi == pytest.approx(1.0, abs=1e-10)


def test_empirical_g_and_intercept_q_give_mean(sample20):
    opts = EstimatorOptions()
    fits = fit_nuisance(sample20, None, Q_INTERCEPT, G_LOGIT, opts)
    detail = target(fits, ExplicitMarginals(fits.g1, "observed"), opts)
    np.testing.assert_allclose(detail.clever, 1.0, atol=1e-12)
    assert detail.result.epsilon == pytest.approx(0.0, abs=1e-10)
    assert detail.result.psi == pytest.approx(sample20.outcome.mean(), abs=1e-12)


def test_aipw_zero_q_is_ipw(sample20):
    fits = fit_nuisance(sample20, None, Q_FULL, G_LOGIT)
    zeros = np.zeros(sample20.n)
    for rule in RULES:
        detail = target(fits, rule, method="aipw")
        res = aipw_from_fits(fits, rule, q_override=(zeros, zeros))
        ipw = np.mean(detail.clever * fits.y)
        assert res.psi == pytest.approx(fits.scale.unscale(ipw), abs=1e-12)


def test_aipw_correct_q_and_unit_h_give_mean():
    w = np.array([0.0, 0.0, 1.0, 1.0])
    y = np.array([0.2, 0.6, 0.5, 0.9])
    s = Sample(w[:, None], [0, 1, 0, 1], y, ("w",))
    fits = fit_nuisance(s, None, parse_formula("y ~ 1 + w + a [identity]"),
                        parse_formula("a ~ 1", "propensity"),
                        EstimatorOptions(outcome_scale=OutcomeScale(0, 1)))
    q = (np.array([0.2, 0.2, 0.5, 0.5]), np.array([0.6, 0.6, 0.9, 0.9]))
    res = aipw_from_fits(fits, Bernoulli(0.5), q_override=q)
    assert res.psi == pytest.approx(y.mean(), abs=1e-12)


def test_aipw_matches_transcription(sample20):
    fits = fit_nuisance(sample20, None, Q_FULL, G_LOGIT)
    for rule in RULES:
        m = marginalize(rule, sample20, fits.summary)
        res = aipw_from_fits(fits, rule)
        oracle = aipw_transcription(list(fits.y), list(sample20.exposure), list(fits.g1),
                                    list(m.probs_treat), list(fits.q0), list(fits.q1),
                                    0.005, 0.995)
        assert res.psi == pytest.approx(fits.scale.unscale(oracle), abs=1e-12)


def test_tmle_and_aipw_wrappers_agree_with_fits(sample20):
    fits = fit_nuisance(sample20, None, Q_FULL, G_LOGIT)
    for rule in RULES:
        assert tmle(sample20, None, rule, Q_FULL, G_LOGIT).psi == tmle_from_fits(fits, rule).psi
        assert aipw(sample20, None, rule, Q_FULL, G_LOGIT).psi == aipw_from_fits(fits, rule).psi


def test_result_record(sample20):
    res = tmle(sample20, None, RankTopS("w"), Q_FULL, G_LOGIT)
    d = res.to_dict()
    for key in ("psi", "se_conditional", "ci", "epsilon", "weights", "n",
                "a_bar", "k_value", "intervention", "is_ers", "is_aers"):
        assert key in d
    assert d["is_ers"] and "se_population" not in d
    assert set(d["weights"]) == {"min", "max", "mean", "truncated_rows"}
    assert res.ci[0] <= res.psi <= res.ci[1]
    allt = tmle(sample20, None, AllTreat(), Q_FULL, G_LOGIT)
    assert allt.se_population >= allt.se_conditional >= 0
    assert "se_population" in allt.to_dict()


# -- variance and intervals -------------------------------------------------

def test_variance_conditional_examples():
    y = np.array([0.2, 0.5, 0.9])
    assert variance_conditional(y, np.ones(3), y) == 0.0
    r = 0.1
    q = np.array([0.5, 0.5, 0.5, 0.5])
    y = q + np.array([r, -r, r, -r])
    assert variance_conditional(q, np.ones(4), y) == pytest.approx(r * r, abs=1e-15)
    assert variance_conditional(q, np.ones(4), y, OutcomeScale(0, 3)) == pytest.approx(9 * r * r)


def test_variance_conditional_loop_oracle():
    q, h, y = FIXED_Q, FIXED_H, FIXED_Y
    loop = sum((hi * (yi - qi)) ** 2 for qi, hi, yi in zip(q, h, y)) / len(q)
    got = variance_conditional(np.array(q), np.array(h), np.array(y), OutcomeScale(-1, 1))
    assert got == pytest.approx(4 * loop, abs=1e-12)


def test_variance_population_examples():
    m = individual_marginals(4, Bernoulli(0.5))
    c = np.full(4, 0.3)
    assert variance_population(c, c, m, 0.3) == pytest.approx(0.0, abs=1e-30)
    m2 = individual_marginals(2, AllTreat())
    psi, d = 0.5, 0.2
    q1 = np.array([psi + d, psi - d])
    assert variance_population(np.zeros(2), q1, m2, psi) == pytest.approx(d * d, abs=1e-15)


def test_variance_population_loop_oracle():
    p = [0.4] * 10
    m = individual_marginals(10, Bernoulli(0.4))
    q0 = np.array(FIXED_Q)
    q1 = np.array(FIXED_Y) * 0.5 + 0.25
    proj = [q1[i] * p[i] + q0[i] * (1 - p[i]) for i in range(10)]
    psi = sum(proj) / 10
    loop = sum((v - psi) ** 2 for v in proj) / 10
    assert variance_population(q0, q1, m, psi, OutcomeScale(0, 2)) == pytest.approx(
        4 * loop, abs=1e-12)


def test_variance_population_refuses_joint_rules(sample20):
    e = exposure_summary(sample20)
    q = np.full(sample20.n, 0.5)
    for rule in (RankTopS("w"), CompleteRandomization()):
        with pytest.raises(ValueError, match="individual-level"):
            variance_population(q, q, marginalize(rule, sample20, e), 0.5)


def test_wald_ci():
    assert wald_ci(1.5, 0.0) == (1.5, 1.5)
    lo, hi = wald_ci(0.0, 1.0, 0.95)
    z = normal_quantile(0.975)
    assert lo == pytest.approx(-z, abs=1e-9) and hi == pytest.approx(z, abs=1e-9)
    assert hi == pytest.approx(1.959964, abs=1e-6)
    z75 = normal_quantile(0.75)
    lo, hi = wald_ci(3.0, 2.0, 0.5)
    assert lo == pytest.approx(3 - 2 * z75, abs=1e-9) and hi == pytest.approx(3 + 2 * z75, abs=1e-9)
    for level in (0.5, 0.8, 0.9, 0.99, 0.999):
        assert wald_ci(0.0, 1.0, level)[1] == pytest.approx(
            normal_quantile(1 - (1 - level) / 2), abs=1e-9)
    with pytest.raises(ValueError):
        wald_ci(0.0, -1.0)
    with pytest.raises(ValueError):
        wald_ci(0.0, 1.0, 1.0)


# -- contrasts --------------------------------------------------------------

def test_direct_effect_true_q():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    a = np.array([0, 1, 0, 1])
    beta, a_bar = 1.0, 0.5
    y = a * w * (1 - beta * a_bar)  # noise-free outcome equals the true mean
    s = Sample(w[:, None], a, y, ("w",))
    fits = fit_nuisance(s, None, Q_FULL, parse_formula("a ~ 1", "propensity"))
    scale = fits.scale
    q_true = (scale.scale(np.zeros(4)), scale.scale(w * (1 - beta * a_bar)))
    arms = [aipw_from_fits(fits, r, q_override=q_true).psi for r in (AllTreat(), AllControl())]
    assert arms[0] - arms[1] == pytest.approx(1.25, abs=1e-12)
    assert arms[0] - arms[1] == pytest.approx((1 - beta * a_bar) * w.mean(), abs=1e-12)


def test_direct_effect_null_toy():
    # Y does not depend on A; the saturated Q gives Q(w,1) = Q(w,0) exactly
    w = np.array([0.0, 0.0, 1.0, 1.0])
    s = Sample(w[:, None], [0, 1, 0, 1], [0.2, 0.2, 0.7, 0.7], ("w",))
    res = direct_effect(s, None, parse_formula("y ~ 1 + w + a + w:a [identity]"),
                        parse_formula("a ~ 1 + w", "propensity"),
                        EstimatorOptions(outcome_scale=OutcomeScale(0, 1)))
    assert res.estimate == pytest.approx(0.0, abs=1e-12)


def test_contrast_of_identical_rules(sample20):
    res = overall_effect_contrast(sample20, None, RankTopS("w"), RankTopS("w"), Q_FULL, G_LOGIT)
    assert res.estimate == 0.0 and res.se == 0.0
    assert res.ci == (0.0, 0.0)


def test_contrast_equals_differenced_runs(sample20):
    fits = fit_nuisance(sample20, None, Q_FULL, G_LOGIT)
    observed = ExplicitMarginals(fits.g1, "observed")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InterventionWarning)
        res = overall_effect_contrast(sample20, None, CompleteRandomization(), observed,
                                      Q_FULL, G_LOGIT)
    a = tmle(sample20, None, CompleteRandomization(), Q_FULL, G_LOGIT)
    b = tmle(sample20, None, observed, Q_FULL, G_LOGIT)
    assert res.estimate == pytest.approx(a.psi - b.psi, abs=1e-12)
    assert res.estimate == pytest.approx(res.components[0].psi - res.components[1].psi, abs=1e-12)


def test_contrast_se_uses_paired_curves(sample20):
    fits = fit_nuisance(sample20, None, Q_FULL, G_LOGIT)
    a = target(fits, AllTreat())
    b = target(fits, AllControl())
    res = contrast_from_fits(fits, AllTreat(), AllControl())
    var = np.mean((a.ic - b.ic) ** 2) * fits.scale.width**2
    assert res.se == pytest.approx(math.sqrt(var / sample20.n), rel=1e-12)
    assert res.se_population >= res.se


def test_non_aers_contrast_warns(sample20):
    with pytest.warns(InterventionWarning, match="not an overall effect"):
        overall_effect_contrast(sample20, None, AllTreat(), RankTopS("w"), Q_FULL, G_LOGIT)


# -- properties -------------------------------------------------------------

def test_mean_clever_covariate_near_one():
    rng = np.random.default_rng(2)
    means = []
    for _ in range(40):
        w = rng.normal(size=5000)
        a = (rng.random(5000) < expit(w)).astype(int)
        s = Sample(w[:, None], a, np.zeros(5000), ("w",))
        m = marginalize(RankTopS("w"), s, exposure_summary(s))
        means.append(clever_covariate(m, fit_glm(s, G_LOGIT), s).mean())
    means = np.array(means)
    assert abs(means.mean() - 1) <= 3 * means.std(ddof=1) / math.sqrt(len(means))


@st.composite
def datasets(draw):
    n = draw(st.integers(8, 60))
    seed = draw(st.integers(0, 2**31))
    beta = draw(st.floats(0.0, 5.0))
    s = make_dataset(n, seed=seed, beta=beta)
    w, a = s.covariates[:, 0], s.exposure
    # a logistic propensity fit needs overlap in w between the exposure groups
    assume(w[a == 0].max() > w[a == 1].min() and w[a == 1].max() > w[a == 0].min())
    return s


@settings(max_examples=40, deadline=None)
@given(datasets(), st.sampled_from(RULES))
def test_tmle_solves_score_and_respects_bounds(s, rule):
    fits = fit_nuisance(s, None, parse_formula("y ~ 1 + w + a"), G_LOGIT)
    detail = target(fits, rule)
    assert abs(np.mean(detail.ic)) <= 1e-8
    y = s.outcome
    assert y.min() <= detail.result.psi <= y.max()
    assert detail.result.psi == fits.scale.lower + fits.scale.width * detail.psi_scaled


@settings(max_examples=25, deadline=None)
@given(datasets(), st.randoms())
def test_permutation_invariance(s, rnd):
    perm = list(range(s.n))
    rnd.shuffle(perm)
    t = s.take(perm)
    spec = parse_formula("y ~ 1 + w + a")
    for rule in RULES:
        for est in (tmle, aipw):
            r1 = est(s, None, rule, spec, G_LOGIT)
            r2 = est(t, None, rule, spec, G_LOGIT)
            assert r1.psi == pytest.approx(r2.psi, abs=1e-10)
            assert r1.se_conditional == pytest.approx(r2.se_conditional, abs=1e-10)
