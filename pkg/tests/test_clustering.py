from __future__ import annotations

import numpy as np
import pytest

from subcal.clustering_estimators import (EstimatorError, LearnedDiscriminant, learn_discriminant_2iso,
                                          learn_mixture_em, misassignment_rate)
from subcal.mixture_model import ExpFamilyComponent, LabelRule, MixtureModel, tv_distance_mc, two_isotropic


def test_well_separated_clusters_recovered():
    m = MixtureModel(np.array([0.5, 0.5]), (ExpFamilyComponent.isotropic([-5.0, 0.0]),
                                            ExpFamilyComponent.isotropic([5.0, 0.0])))
    X = m.sample_features(1000, np.random.default_rng(0))
    rule = learn_discriminant_2iso(X)
    assert misassignment_rate(rule, m, X) <= 0.01
    assert np.allclose(np.sort(rule.means[:, 0]), [-5, 5], atol=0.3)


def test_moderate_separation_most_seeds_within_five_percent():
    m = two_isotropic(3.0)
    ok = 0
    for seed in range(20):
        X = m.sample_features(5000, np.random.default_rng(seed))
        Xe = m.sample_features(5000, np.random.default_rng(1000 + seed))
        ok += misassignment_rate(learn_discriminant_2iso(X), m, Xe) <= 0.05
    assert ok >= 18


def test_discriminant_scale_equivariant():
    X = two_isotropic(2.0).sample_features(500, np.random.default_rng(1))
    a, b = learn_discriminant_2iso(X), learn_discriminant_2iso(3.0 * X)
    assert np.allclose(3.0 * a.means, b.means, rtol=1e-12)
    assert np.array_equal(a(X), b(3.0 * X))


def test_discriminant_rule_and_json():
    rule = LearnedDiscriminant(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert rule(np.array([-0.2, 9.0])) == 0 and rule(np.array([0.2, -9.0])) == 1
    assert rule(np.zeros(2)) == 0
    assert np.array_equal(rule.boundary_point(), [0, 0]) and np.array_equal(rule.normal(), [2, 0])
    assert rule.to_json()["means"] == [[-1.0, 0.0], [1.0, 0.0]]


def test_discriminant_error_cases():
    with pytest.raises(EstimatorError):
        learn_discriminant_2iso(np.zeros((10, 2)))
    with pytest.raises(EstimatorError):
        learn_discriminant_2iso(np.ones((100, 2)))


def test_em_single_component_is_sample_moments():
    X = np.random.default_rng(2).normal(size=(400, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.2], [0, 0, 2.0]])
    m = learn_mixture_em(X, 1, "gaussian_full", iters=3)
    gp = m.components[0].gaussian_params
    assert np.allclose(gp.mean, X.mean(axis=0), atol=1e-10)
    assert np.allclose(gp.cov, np.cov(X.T, bias=True), atol=1e-10)


def test_em_one_dim_separated_means():
    m = MixtureModel(np.array([0.4, 0.6]), (ExpFamilyComponent.isotropic([-4.0]), ExpFamilyComponent.isotropic([4.0])))
    X = m.sample_features(3000, np.random.default_rng(3))
    est = learn_mixture_em(X, 2, "gaussian_full")
    mus = sorted(c.gaussian_params.mean[0] for c in est.components)
    assert abs(mus[0] + 4) <= 0.1 and abs(mus[1] - 4) <= 0.1
    assert np.allclose(sorted(est.weights), [0.4, 0.6], atol=0.03)


def test_em_components_close_in_total_variation():
    truth = two_isotropic(4.0)
    X = truth.sample_features(5000, np.random.default_rng(4))
    est = learn_mixture_em(X, 2, "gaussian_isotropic")
    order = np.argsort([c.gaussian_params.mean[0] for c in est.components])
    for g, j in enumerate(order):
        tv, _ = tv_distance_mc(truth.components[g], est.components[j], 20_000, g)
        assert tv <= 0.1


def test_em_deterministic():
    X = two_isotropic(1.0).sample_features(600, np.random.default_rng(5))
    a, b = learn_mixture_em(X, 2, seed=7), learn_mixture_em(X, 2, seed=7)
    assert np.array_equal(a.posterior(X), b.posterior(X))


def test_em_poisson_family():
    m = MixtureModel(np.array([0.5, 0.5]), (ExpFamilyComponent.poisson([1.0, 1.0]),
                                            ExpFamilyComponent.poisson([12.0, 12.0])))
    X = m.sample_features(2000, np.random.default_rng(6))
    est = learn_mixture_em(X, 2, "poisson_product")
    assert misassignment_rate(est.discriminant, m, X) <= 0.02


def test_em_error_cases():
    with pytest.raises(EstimatorError):
        learn_mixture_em(np.zeros((10, 2)), 2)
    with pytest.raises(EstimatorError):
        learn_mixture_em(np.zeros((100, 2)), 0)
    X = np.ones((100, 1))
    X[0] = np.nan
    with pytest.raises(EstimatorError):
        learn_mixture_em(X, 1)


def test_misassignment_label_swap_invariant():
    m = two_isotropic(2.0, label_rule=LabelRule("constant", {"p": 0.5}))
    X = m.sample_features(300, np.random.default_rng(8))
    assert misassignment_rate(lambda x: 1 - m.discriminant(x), m, X) == 0.0
