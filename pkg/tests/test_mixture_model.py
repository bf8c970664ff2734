from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm, poisson

from subcal.mixture_model import (ExpFamilyComponent, LabelRule, MixtureModel, ModelError, sufficient_statistic,
                                  tv_distance_mc, two_isotropic)


def random_pd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + 0.5 * np.eye(d)


def random_model(rng, family, k, d):
    w = 0.05 + (1 - 0.05 * k) * rng.dirichlet(np.ones(k))
    comps = []
    for _ in range(k):
        mu = rng.normal(scale=2, size=d)
        if family == "gaussian_full":
            comps.append(ExpFamilyComponent.gaussian(mu, random_pd(rng, d)))
        elif family == "gaussian_isotropic":
            comps.append(ExpFamilyComponent.isotropic(mu, rng.uniform(0.3, 3)))
        else:
            comps.append(ExpFamilyComponent.poisson(rng.uniform(0.5, 6, size=d)))
    return MixtureModel(w / w.sum(), tuple(comps), LabelRule("constant", {"p": 0.4}))


FAMILIES = ["gaussian_full", "gaussian_isotropic", "poisson_product"]


# ---------------------------------------------------------------- components

def test_standard_normal_log_density_at_mode():
    c = ExpFamilyComponent.isotropic([0.0], 1.0)
    assert c.log_density(np.array([0.0])) == pytest.approx(-0.9189385332046727, abs=1e-12)
    assert c.log_partition == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


def test_full_gaussian_density_matches_closed_form():
    rng = np.random.default_rng(0)
    cov = random_pd(rng, 2)
    mu = rng.normal(size=2)
    c = ExpFamilyComponent.gaussian(mu, cov)
    X = rng.normal(scale=2, size=(10_000, 2)) + mu
    ours = np.exp(c.log_density(X))
    ref = multivariate_normal(mu, cov).pdf(X)
    assert np.max(np.abs(ours / ref - 1)) <= 1e-9


def test_poisson_density_matches_scipy():
    c = ExpFamilyComponent.poisson([2.0, 0.7])
    X = np.array([[0, 0], [3, 1], [7, 2]], dtype=float)
    ref = poisson(2.0).logpmf(X[:, 0]) + poisson(0.7).logpmf(X[:, 1])
    assert np.allclose(c.log_density(X), ref, rtol=1e-12)


def test_sufficient_statistic_dimensions():
    assert ExpFamilyComponent.gaussian(np.zeros(2), np.eye(2)).stat_dim == 5
    for d in (1, 2, 5):
        assert ExpFamilyComponent.isotropic(np.zeros(d)).stat_dim <= 2 * d
    assert sufficient_statistic("gaussian_full", np.ones((3, 2))).shape == (3, 5)


@pytest.mark.parametrize("family", ["gaussian_full", "gaussian_isotropic"])
def test_natural_parameter_roundtrip(family):
    rng = np.random.default_rng(1)
    m = random_model(rng, family, 1, 3)
    c = m.components[0]
    back = ExpFamilyComponent.from_natural(family, c.theta, 3)
    assert np.allclose(back.gaussian_params.mean, c.gaussian_params.mean, rtol=1e-10)
    assert np.allclose(back.gaussian_params.cov, c.gaussian_params.cov, rtol=1e-10)


def test_invalid_parameters_rejected():
    with pytest.raises(ModelError):
        ExpFamilyComponent.gaussian([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ModelError):
        ExpFamilyComponent.isotropic([0.0], -1.0)
    with pytest.raises(ModelError):
        ExpFamilyComponent.poisson([0.0])
    c = ExpFamilyComponent.isotropic([0.0])
    with pytest.raises(ModelError):
        MixtureModel(np.array([0.97, 0.03]), (c, c))
    with pytest.raises(ModelError):
        MixtureModel(np.array([0.5, 0.6]), (c, c))


# ---------------------------------------------------------------- sampling

def test_sampling_examples():
    m1 = MixtureModel(np.array([1.0]), (ExpFamilyComponent.isotropic([0.0]),), LabelRule("constant", {"p": 1.0}))
    s = m1.sample(100_000, 0)
    assert abs(s.x.mean()) < 0.02
    assert np.all(s.y == 1)
    m2 = two_isotropic(1.0, label_rule=LabelRule("constant", {"p": 0.5}))
    frac = m2.sample(100_000, 3).component.mean()
    assert 0.49 <= frac <= 0.51


def test_sampling_bitwise_deterministic():
    m = random_model(np.random.default_rng(2), "gaussian_full", 3, 2)
    a, b = m.sample(500, 11), m.sample(500, 11)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(a.component, b.component)


def test_sample_iterates_labeled_samples():
    m = two_isotropic(1.0, label_rule=LabelRule("constant", {"p": 0.5}))
    first = next(iter(m.sample(3, 0)))
    assert first.x.shape == (2,) and first.y in (0, 1) and first.true_component in (0, 1)


# ---------------------------------------------------------------- posterior / discriminant

def test_posterior_symmetric_midpoint():
    m = two_isotropic(2.0)
    assert np.allclose(m.posterior(np.zeros(2)), [0.5, 0.5], atol=1e-15)
    assert m.discriminant(np.zeros(2)) == 0


def test_posterior_single_component():
    m = MixtureModel(np.array([1.0]), (ExpFamilyComponent.isotropic([0.0, 1.0]),))
    assert np.all(m.posterior(np.random.default_rng(0).normal(size=(5, 2))) == 1.0)


def test_posterior_matches_direct_density_ratio():
    m = MixtureModel(np.array([0.5, 0.5]), (ExpFamilyComponent.isotropic([-1.0]), ExpFamilyComponent.isotropic([1.0])))
    a, b = norm(-1, 1).pdf(0.3), norm(1, 1).pdf(0.3)
    assert m.posterior(np.array([0.3]))[1] == pytest.approx(b / (a + b), rel=1e-12)


def test_discriminant_three_component_brute_force():
    comps = tuple(ExpFamilyComponent.isotropic([mu], s2) for mu, s2 in [(-2, 1.0), (0.5, 0.4), (3, 2.0)])
    w = np.array([0.3, 0.3, 0.4])
    m = MixtureModel(w, comps)
    xs = np.linspace(-6, 8, 100)
    dens = np.stack([w[i] * norm(c.params["mean"][0], math.sqrt(c.params["sigma2"])).pdf(xs) for i, c in enumerate(comps)], 1)
    assert np.array_equal(m.discriminant(xs.reshape(-1, 1)), dens.argmax(axis=1))


def test_discriminant_nearest_mean():
    m = two_isotropic(2.0)
    assert m.discriminant(np.array([-0.3, 5.0])) == 0
    assert m.discriminant(np.array([0.3, -5.0])) == 1


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_posterior_normalised_and_ratio_consistent(family, k, d, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, family, k, d)
    X = m.sample_features(50, rng)
    P = m.posterior(X)
    assert np.all(P >= 0) and np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-12
    g, j = rng.integers(k), rng.integers(k)
    lr = m.likelihood_ratio(g, j, X)
    back = m.likelihood_ratio(j, g, X)
    assert np.allclose(lr * back, 1.0, rtol=1e-9)
    ok = (P[:, j] > 1e-200) & (P[:, g] > 1e-200)
    assert np.allclose(lr[ok], P[ok, g] / P[ok, j], rtol=1e-9)
    assert np.all(m.likelihood_ratio(g, g, X) == 1.0)


def test_isotropic_log_ratio_is_affine():
    rng = np.random.default_rng(4)
    d = 3
    comps = tuple(ExpFamilyComponent.isotropic(rng.normal(size=d), 1.7) for _ in range(2))
    m = MixtureModel(np.array([0.4, 0.6]), comps)
    X = rng.normal(size=(d + 2, d))
    A = np.column_stack([X, np.ones(d + 2)])
    lr = m.likelihood_ratio(0, 1, X, log=True)
    coef, *_ = np.linalg.lstsq(A, lr, rcond=None)
    assert np.allclose(A @ coef, lr, atol=1e-10)
    assert np.allclose(coef[:d], (comps[0].params["mean"] - comps[1].params["mean"]) / 1.7, atol=1e-10)


def test_posterior_ignores_label():
    m = two_isotropic(1.0)
    x = np.array([0.2, -0.1])
    assert np.array_equal(m.posterior(x, y=0), m.posterior(x, y=1))


# ---------------------------------------------------------------- label rules

def test_label_rules():
    x = np.array([[0.0, 0.0], [2.0, -1.0], [-3.0, 5.0]])
    assert np.allclose(LabelRule("logistic", {"w": [1.0, 0.0], "b": 0.0})(x), [0.5, 1 / (1 + math.exp(-2)), 1 / (1 + math.exp(3))])
    pw = LabelRule("piecewise", {"regions": [[[None, 0.5], [None, None]]], "p": [0.2, 0.9]})
    assert np.array_equal(pw(x), [0.2, 0.9, 0.2])
    with pytest.raises(ModelError):
        LabelRule("constant", {"p": 1.5})
    with pytest.raises(ModelError):
        LabelRule("piecewise", {"regions": [], "p": [0.1, 0.2]})


# ---------------------------------------------------------------- serialisation

@pytest.mark.parametrize("family", FAMILIES)
def test_json_roundtrip_lossless(family, tmp_path):
    m = random_model(np.random.default_rng(9), family, 3, 2)
    m.save(tmp_path / "m.json")
    back = MixtureModel.load(tmp_path / "m.json")
    assert json.dumps(back.to_json()) == json.dumps(m.to_json())
    X = m.sample_features(20, np.random.default_rng(0))
    assert np.array_equal(back.posterior(X), m.posterior(X))
    doc = m.to_json()
    assert set(doc) == {"k", "d", "family", "weights", "components", "label_rule"}


def test_json_rejects_inconsistent_k():
    doc = two_isotropic(1.0).to_json()
    doc["k"] = 3
    with pytest.raises(ModelError):
        MixtureModel.from_json(doc)


# ---------------------------------------------------------------- TV diagnostic

def test_tv_identical_is_near_zero():
    c = ExpFamilyComponent.isotropic([0.0])
    est, se = tv_distance_mc(c, c, 5000, 0)
    assert est <= 2 * se + 1e-15


def test_tv_shifted_normals_closed_form():
    p, q = ExpFamilyComponent.isotropic([0.0]), ExpFamilyComponent.isotropic([1.0])
    est, se = tv_distance_mc(p, q, 200_000, 1)
    truth = 2 * norm.cdf(0.5) - 1
    assert abs(est - truth) <= 4 * se
    assert truth == pytest.approx(0.3829, abs=1e-4)


def test_tv_far_apart_near_one():
    p, q = ExpFamilyComponent.isotropic([0.0], 0.01), ExpFamilyComponent.isotropic([50.0], 0.01)
    assert tv_distance_mc(p, q, 1000, 2)[0] > 0.999


def test_tv_rejects_small_sample():
    c = ExpFamilyComponent.isotropic([0.0])
    with pytest.raises(ValueError):
        tv_distance_mc(c, c, 50, 0)
