import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from importlib import resources

from ratemaking.bands import RatingFactors, UnknownLevelError
from ratemaking.families import Bernoulli, Gamma, InverseGaussian, NegativeBinomial, Poisson
from ratemaking.glm import (FitControl, SingularFitError, estimate_dispersion, fit, fit_negbin, load_model,
                            model_from_dict, model_to_dict, predict, refit, save_model, simulate, wald_test)

from conftest import TWO_LEVELS, toy_design, toy_levels, two_factor_sample

sm = pytest.importorskip("statsmodels.api")


def fixture_model(name):
    text = resources.files("ratemaking").joinpath("data", name).read_text(encoding="utf-8")
    return model_from_dict(json.loads(text))


def poisson_sample(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    factors, eta, e = two_factor_sample(rng, n)
    y = rng.poisson(e * np.exp(eta)).astype(float)
    return toy_design("count ~ x + z", factors, y, e, TWO_LEVELS)


# ---------------------------------------------------------------- closed forms

def test_intercept_only_poisson_closed_form():
    rng = np.random.default_rng(5)
    e = rng.uniform(0.1, 2.0, 300)
    y = rng.poisson(0.3 * e).astype(float)
    m = fit(toy_design("count ~ 1", [{}] * 300, y, e, {}), Poisson())
    assert math.exp(m.coef("(Intercept)")) == pytest.approx(y.sum() / e.sum(), rel=1e-10)


def test_intercept_only_gamma_closed_form():
    y = np.random.default_rng(2).gamma(2.0, 3.0, 400)
    m = fit(toy_design("amount ~ 1", [{}] * 400, y), Gamma())
    assert m.coef("(Intercept)") == pytest.approx(math.log(y.mean()), rel=1e-10)


def test_three_point_poisson():
    m = fit(toy_design("count ~ 1", [{}] * 3, [0, 1, 2], [1, 1, 1], {}), Poisson())
    assert m.coef("(Intercept)") == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(m.mu, 1.0)


def test_single_observation_criteria():
    m = fit(toy_design("count ~ 1", [{}], [1], [1], {}), Poisson())
    assert m.loglik == pytest.approx(-1.0)
    assert m.aic == pytest.approx(4.0) and m.bic == pytest.approx(2.0)


def test_two_cell_poisson_standard_error():
    rng = np.random.default_rng(9)
    x = np.repeat(["a", "b"], 500)
    y = np.concatenate([rng.poisson(0.5, 500), rng.poisson(1.5, 500)]).astype(float)
    m = fit(toy_design("count ~ x", [{"x": v} for v in x], y, np.ones(1000), toy_levels(x="ab")), Poisson())
    mu0, mu1 = y[:500].mean(), y[500:].mean()
    assert m.std_errors[1] ** 2 == pytest.approx(1 / (mu0 * 500) + 1 / (mu1 * 500), rel=1e-9)


# ---------------------------------------------------------------- statsmodels oracle

@pytest.mark.parametrize("family", ["poisson", "gamma", "inverse_gaussian", "bernoulli", "nb"])
def test_matches_statsmodels(family):
    rng = np.random.default_rng(21)
    n = 3000
    factors, eta, e = two_factor_sample(rng, n, base=0.5)
    if family == "poisson":
        y, fam, ref_fam, off = rng.poisson(e * np.exp(eta)), Poisson(), sm.families.Poisson(), np.log(e)
    elif family == "nb":
        mu = e * np.exp(eta)
        y = rng.poisson(rng.gamma(2.0, mu / 2.0))
        fam, ref_fam, off = NegativeBinomial(0.5), sm.families.NegativeBinomial(alpha=0.5), np.log(e)
    elif family == "gamma":
        y, fam, ref_fam, off = rng.gamma(2.0, np.exp(eta) / 2.0), Gamma(), sm.families.Gamma(sm.families.links.Log()), None
    elif family == "inverse_gaussian":
        y = rng.wald(np.exp(eta), 4.0)
        fam, ref_fam, off = InverseGaussian(), sm.families.InverseGaussian(sm.families.links.Log()), None
    else:
        p = 1 / (1 + np.exp(-(eta - 0.5)))
        y, fam, ref_fam, off = (rng.random(n) < p), Bernoulli(), sm.families.Binomial(), None
    y = np.asarray(y, float)
    formula = "count ~ x + z" if off is not None else "y ~ x + z"
    d = toy_design(formula, factors, y, e if off is not None else None, TWO_LEVELS)
    m = fit(d, fam, "logit" if family == "bernoulli" else "log")
    ref = sm.GLM(y, d.X, family=ref_fam, offset=off).fit(tol=1e-12, scale=1.0 if fam.fixed_dispersion else "X2")
    assert m.converged
    assert np.allclose(m.coefficients, ref.params, rtol=1e-7, atol=1e-9)
    assert np.allclose(m.std_errors, ref.bse, rtol=1e-6)
    assert m.deviance == pytest.approx(ref.deviance, rel=1e-8)
    assert m.dispersion == pytest.approx(ref.scale, rel=1e-8)
    if fam.fixed_dispersion:
        assert m.loglik == pytest.approx(ref.llf, rel=1e-9)


# ---------------------------------------------------------------- invariants

def test_score_and_monotone_deviance():
    m = fit(poisson_sample(), Poisson())
    assert m.converged and m.score_norm < 1e-6
    assert all(b <= a * (1 + 1e-12) for a, b in zip(m.deviance_trace, m.deviance_trace[1:]))
    assert np.allclose(m.covariance, m.covariance.T)
    assert np.all(np.linalg.eigvalsh(m.covariance) > 0)
    assert np.allclose(m.mu, np.exp(m.eta + m.design.offset))


def test_row_and_column_order_invariance():
    d = poisson_sample(2000, 4)
    m = fit(d, Poisson())
    perm = np.random.default_rng(0).permutation(d.n)
    dr = replace(d, X=d.X[perm], y=d.y[perm], offset=d.offset[perm], weights=d.weights[perm])
    assert np.allclose(fit(dr, Poisson()).coefficients, m.coefficients, rtol=1e-10, atol=1e-12)
    cols = [0, 3, 1, 2]
    dc = replace(d, X=d.X[:, cols], labels=tuple(d.labels[i] for i in cols), terms=tuple(d.terms[i] for i in cols))
    mc = fit(dc, Poisson())
    for lb in d.labels:
        assert mc.coef(lb) == pytest.approx(m.coef(lb), rel=1e-10, abs=1e-12)


def test_weights_scale_covariance():
    d = poisson_sample(1000, 8)
    m = fit(d, Poisson())
    m3 = fit(replace(d, weights=d.weights * 3.0), Poisson())
    assert np.allclose(m3.coefficients, m.coefficients, atol=1e-10)
    assert np.allclose(m3.cov_unscaled, m.cov_unscaled / 3.0, rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=6, max_size=30))
def test_saturated_poisson_dominates_submodels(ys):
    y = np.array(ys, float)
    x = ["abc"[i % 3] for i in range(len(y))]
    e = np.ones(len(y))
    small = fit(toy_design("count ~ 1", [{}] * len(y), y, e, {}), Poisson())
    big = fit(toy_design("count ~ x", [{"x": v} for v in x], y, e, toy_levels(x="abc")), Poisson())
    from ratemaking.families import Poisson as P
    sat = P().loglik(y, np.maximum(y, 1e-300), e)
    assert sat >= big.loglik - 1e-9 and big.loglik >= small.loglik - 1e-9
    assert big.aic <= small.aic + 2 * (big.p - small.p) + 1e-9


def test_singular_design_names_columns():
    rows = [{"x": "b", "z": "v"}, {"x": "a", "z": "u"}, {"x": "b", "z": "v"}, {"x": "a", "z": "u"}]
    d = toy_design("amount ~ x + z", rows, [1.0, 2.0, 3.0, 4.0], levels=toy_levels(x="ab", z="uv"))
    with pytest.raises(SingularFitError) as info:
        fit(d, Gamma())
    assert {"x:b", "z:v"} <= set(info.value.columns)


def test_non_convergence_is_flagged():
    m = fit(poisson_sample(), Poisson(), control=FitControl(max_iter=1))
    assert not m.converged and "not_converged" in m.flags


def test_domain_errors():
    with pytest.raises(ValueError):
        fit(toy_design("amount ~ 1", [{}] * 2, [1.0, 0.0]), Gamma())
    with pytest.raises(ValueError):
        fit(toy_design("y ~ 1", [{}] * 2, [1.0, 2.0]), Bernoulli(), "logit")


# ---------------------------------------------------------------- dispersion and NB

def test_dispersion_estimates():
    rng = np.random.default_rng(31)
    factors, eta, _ = two_factor_sample(rng, 10_000, base=1.0)
    y = rng.gamma(1.0, np.exp(eta))
    m = fit(toy_design("amount ~ x + z", factors, y, levels=TWO_LEVELS), Gamma())
    assert 0.9 <= estimate_dispersion(m, "pearson") <= 1.1
    assert estimate_dispersion(m, "deviance") == pytest.approx(m.deviance / (m.n - m.p))
    # saturated fit: one group per observation pair with equal values
    sat = fit(toy_design("amount ~ x", [{"x": "a"}, {"x": "a"}, {"x": "b"}, {"x": "b"}], [2.0, 2.0, 5.0, 5.0],
                         levels=toy_levels(x="ab")), Gamma())
    assert estimate_dispersion(sat, "deviance") == pytest.approx(0.0, abs=1e-12)
    pois = fit(poisson_sample(50_000, 2), Poisson())
    assert 0.9 <= estimate_dispersion(pois, "pearson") <= 1.1
    with pytest.raises(ValueError):
        estimate_dispersion(fit(toy_design("count ~ 1", [{}], [1], [1], {}), Poisson()))


def test_negative_binomial_recovers_v():
    rng = np.random.default_rng(17)
    factors, eta, e = two_factor_sample(rng, 50_000, base=0.0)
    mu = e * np.exp(eta)
    y = rng.poisson(rng.gamma(2.0, mu / 2.0)).astype(float)
    m = fit_negbin(toy_design("count ~ x + z", factors, y, e, TWO_LEVELS))
    assert 0.4 <= m.nb_v <= 0.6
    assert m.converged and m.n_extra == 1 and "poisson_limit" not in m.flags


def test_negative_binomial_poisson_limit():
    rng = np.random.default_rng(18)
    factors, eta, e = two_factor_sample(rng, 50_000, base=1.0)
    y = rng.poisson(e * np.exp(eta)).astype(float)
    m = fit_negbin(toy_design("count ~ x + z", factors, y, e, TWO_LEVELS))
    assert "poisson_limit" in m.flags and m.family == Poisson()
    assert m.nb_v < 0.01


def test_negative_binomial_two_point_equidispersed():
    y = np.array([0.0, 2.0] * 50)
    m = fit_negbin(toy_design("count ~ 1", [{}] * 100, y, np.ones(100), {}))
    assert "poisson_limit" in m.flags and m.nb_v < 1e-6


# ---------------------------------------------------------------- prediction, Wald, simulation, I/O

def test_predict_with_published_frequency_table():
    m = fixture_model("table6_frequency.json")
    base = RatingFactors(model="M2", region="R2", age="E4")
    assert predict(m, base) == pytest.approx(0.143, abs=5e-4)
    assert predict(m, base, exposure=2.0) == pytest.approx(0.286, abs=1e-3)
    assert predict(m, base.replace(age="E2")) == pytest.approx(0.143 * 1.178, rel=1e-9)
    with pytest.raises(UnknownLevelError):
        predict(m, base.replace(age="E9"))


def test_wald_tests():
    m = fixture_model("table6_frequency.json")
    c = np.zeros(m.p)
    c[m.labels.index("model:M1×region:R3")] = 1
    z, p = wald_test(m, c)
    assert p == pytest.approx(0.58, abs=0.01)
    m2 = replace(m, coefficients=np.where(np.arange(m.p) == 1, 1.96 * m.std_errors[1], m.coefficients))
    c = np.eye(m.p)[1]
    assert wald_test(m2, c)[1] == pytest.approx(0.05, abs=1e-3)
    i, j = m.labels.index("age:E1"), m.labels.index("age:E2")
    m3 = replace(m, coefficients=np.where(np.arange(m.p) == j, m.coefficients[i], m.coefficients))
    assert wald_test(m3, np.eye(m.p)[i] - np.eye(m.p)[j])[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wald_test(m, np.zeros(m.p))


def test_simulate_deterministic_and_mean():
    n = 1_000_000
    m = fit(toy_design("count ~ 1", [{}] * 7, [1, 0, 0, 0, 0, 0, 0], np.ones(7), {}), Poisson())
    assert math.exp(m.coef("(Intercept)")) == pytest.approx(1 / 7, rel=1e-10)
    big = replace(m, mu=np.full(n, 0.143), design=replace(m.design, weights=np.ones(n)))
    a, b = simulate(big, 7), simulate(big, 7)
    assert np.array_equal(a, b) and not np.array_equal(a, simulate(big, 8))
    assert a.mean() == pytest.approx(0.143, abs=0.001)
    g = fit(toy_design("amount ~ 1", [{}] * 100, np.random.default_rng(0).gamma(1, 2, 100)), Gamma())
    assert np.all(simulate(g, 1) > 0)


def test_serialization_round_trip(tmp_path):
    d = poisson_sample(2000, 12)
    m = fit_negbin(d)
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    assert back.labels == m.labels and back.formula == m.formula and back.family == m.family
    assert np.allclose(back.coefficients, m.coefficients, rtol=1e-12)
    assert np.allclose(back.covariance, m.covariance, rtol=1e-12)
    for attr in ("deviance", "loglik", "dispersion", "aic", "bic"):
        assert getattr(back, attr) == pytest.approx(getattr(m, attr), rel=1e-9)
    doc = model_to_dict(m)
    assert {"formula", "family", "link", "coefficients", "dispersion", "nb_v", "deviance", "scaled_deviance",
            "loglik", "aic", "bic", "n", "p", "converged", "iterations"} <= set(doc)
    again = refit(back, design=d)
    assert np.allclose(again.coefficients, m.coefficients, atol=1e-8)
