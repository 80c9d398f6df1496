"""
Tests for sampling, densities, kappa and the L2(mu) model distance.
"""
import math
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from robustness.distributions import (LabeledDistribution, check_normalization, density, distribution_from_dict,
                                      distribution_to_dict, gaussian, gaussian_mixture, kappa,
                                      kappa_gaussian_closed_form, l2_model_distance, log_density, sample,
                                      sample_labeled, uniform_box)
from robustness.models import constant_model, linear_sigmoid
from utils.errors import AbsoluteContinuityError, InputError, NonIntegrableWarning


class TestSampling:

    def test_uniform_box_support(self):
        X = sample(uniform_box([0, 0], [1, 1]), 3, seed=7)
        assert X.shape == (3, 2)
        assert np.all((X >= 0.0) & (X <= 1.0))

    def test_gaussian_mean(self):
        X = sample(gaussian([0.0, 0.0], 1.0), 100_000, seed=11)
        assert np.all(np.abs(X.mean(axis=0)) < 0.02)

    def test_same_seed_same_draws(self):
        mix = gaussian_mixture([0.3, 0.7], [gaussian([-1.0], 0.5), gaussian([2.0], 0.1)])
        for dist in (gaussian([1.0, 2.0], 0.3), uniform_box([0], [2]), mix):
            np.testing.assert_array_equal(sample(dist, 1, seed=5), sample(dist, 1, seed=5))
        np.testing.assert_array_equal(sample(mix, 50, seed=(3, 4)), sample(mix, 50, seed=(3, 4)))

    def test_zero_draws_rejected(self):
        with pytest.raises(InputError):
            sample(gaussian([0.0], 1.0), 0, seed=1)

    def test_mixture_weights_validated(self):
        with pytest.raises(InputError):
            gaussian_mixture([0.5, 0.6], [gaussian([0.0], 1.0), gaussian([1.0], 1.0)])
        with pytest.raises(InputError):
            gaussian_mixture([1.0], [uniform_box([0], [1])])

    def test_labeled_sample_inside_ball(self):
        labeled = LabeledDistribution(marginal=gaussian([0.0, 0.0], 4.0), labeler=linear_sigmoid([4.0, -2.0]))
        X, y = sample_labeled(labeled, 500, seed=2, B=1.0)
        assert np.all(np.linalg.norm(X, axis=1) <= 1.0 + 1e-12)
        assert set(np.unique(y)) <= {-1.0, 1.0}


class TestDensity:

    def test_standard_normal_at_zero(self):
        assert density(gaussian([0.0], 1.0), np.array([0.0])) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi))

    def test_uniform_box(self):
        assert density(uniform_box([0], [1]), np.array([2.0])) == 0.0
        assert density(uniform_box([0], [2]), np.array([1.0])) == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            density(gaussian([0.0, 0.0], 1.0), np.array([0.0, 0.0, 0.0]))

    def test_diagonal_gaussian_matches_scipy(self):
        dist = gaussian([0.5, -1.0], [0.2, 3.0])
        x = np.array([0.1, 0.4])
        expected = stats.multivariate_normal([0.5, -1.0], np.diag([0.2, 3.0])).pdf(x)
        assert density(dist, x) == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("dist", [
        gaussian([0.0], 2.0),
        gaussian([0.3, -0.2], [0.5, 0.25]),
        gaussian_mixture([0.4, 0.6], [gaussian([0.0, 0.0], 0.3), gaussian([1.0, 1.0], 0.2)]),
        uniform_box([0, -1], [1, 1]),
    ])
    def test_normalization(self, dist):
        assert check_normalization(dist) == pytest.approx(1.0, abs=1e-4)


class TestKappa:

    def test_identical_distributions(self):
        mu = gaussian([0.0, 0.0], 0.25)
        est = kappa(mu, mu, n_mc=5_000, seed=1)
        assert est.value == 1.0
        assert est.reliable

    def test_nested_uniform_boxes(self):
        est = kappa(uniform_box([0], [0.5]), uniform_box([0], [1]), n_mc=1_000, seed=0)
        assert est.value == pytest.approx(math.sqrt(2.0), abs=1e-12)

    @pytest.mark.parametrize("mu_tilde,mu,lo,hi", [
        (gaussian([1.0], 0.25), gaussian([0.0], 1.0), -10.0, 10.0),
        (gaussian([0.3], 0.5), gaussian([-0.2], 1.0), -10.0, 10.0),
        (uniform_box([-0.5], [0.5]), gaussian([0.0], 1.0), -0.5, 0.5),
        (uniform_box([-0.5], [1.0]), gaussian([0.5], 0.5), -0.5, 1.0),
        (uniform_box([0.0], [0.5]), uniform_box([-1.0], [1.0]), 0.0, 0.5),
    ])
    def test_matches_quadrature(self, mu_tilde, mu, lo, hi):
        integral, _ = integrate.quad(lambda t: density(mu_tilde, np.array([t])) ** 2 / density(mu, np.array([t])),
                                     lo, hi, limit=200)
        est = kappa(mu_tilde, mu, n_mc=100_000, seed=3)
        assert est.reliable
        assert abs(est.value - math.sqrt(integral)) <= 3 * est.stderr + 1e-9

    def test_closed_form_matches_quadrature(self):
        mu_tilde, mu = gaussian([1.0], 0.25), gaussian([0.0], 1.0)
        integral, _ = integrate.quad(lambda t: density(mu_tilde, np.array([t])) ** 2 / density(mu, np.array([t])),
                                     -10, 10, limit=200)
        assert kappa_gaussian_closed_form(mu_tilde, mu) == pytest.approx(math.sqrt(integral), rel=1e-8)

    def test_log_density_matches_density(self):
        dist = gaussian_mixture([0.4, 0.6], [gaussian([0.0, 0.0], 0.3), gaussian([1.0, 1.0], 0.2)])
        x = np.array([[0.1, -0.2], [0.8, 1.1]])
        np.testing.assert_allclose(np.exp(log_density(dist, x)), density(dist, x), rtol=1e-12)

    def test_cauchy_schwarz_lower_bound(self):
        rng = np.random.default_rng(42)
        mu = gaussian([0.0, 0.0], 0.25)
        for _ in range(5):
            mu_tilde = gaussian(rng.normal(scale=0.3, size=2), rng.uniform(0.005, 0.3))
            est = kappa(mu_tilde, mu, n_mc=20_000, seed=int(rng.integers(1 << 30)))
            assert est.value >= 1.0 - 3 * est.stderr

    def test_stderr_shrinks_with_n(self):
        mu_tilde, mu = gaussian([0.2, 0.0], 0.05), gaussian([0.0, 0.0], 0.25)
        small = kappa(mu_tilde, mu, n_mc=50_000, seed=8)
        large = kappa(mu_tilde, mu, n_mc=100_000, seed=9)
        assert large.stderr / small.stderr == pytest.approx(1.0 / math.sqrt(2.0), rel=0.2)

    def test_support_violation(self):
        with pytest.raises(AbsoluteContinuityError):
            kappa(gaussian([0.0], 1.0), uniform_box([-1], [1]), n_mc=100)
        with pytest.raises(AbsoluteContinuityError):
            kappa(uniform_box([0], [2]), uniform_box([0], [1]), n_mc=100)

    def test_non_integrable_flagged(self):
        mu_tilde, mu = gaussian([0.0], 3.0), gaussian([0.0], 1.0)
        with pytest.warns(NonIntegrableWarning):
            est = kappa(mu_tilde, mu, n_mc=10_000, seed=0)
        assert not est.reliable
        assert kappa_gaussian_closed_form(mu_tilde, mu) == float("inf")

    def test_narrow_local_distribution_is_reliable(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error", NonIntegrableWarning)
            est = kappa(gaussian([0.1, 0.1], 0.01), gaussian([0.0, 0.0], 0.25), n_mc=20_000, seed=4)
        assert est.reliable
        expected = kappa_gaussian_closed_form(gaussian([0.1, 0.1], 0.01), gaussian([0.0, 0.0], 0.25))
        assert abs(est.value - expected) <= 4 * est.stderr


class TestModelDistance:

    def test_identical_models(self):
        m = linear_sigmoid([1.0, -1.0])
        assert l2_model_distance(m, m, gaussian([0.0, 0.0], 1.0), n_mc=1_000).value == 0.0

    def test_constant_models(self):
        est = l2_model_distance(constant_model(0.2, 2), constant_model(0.7, 2), gaussian([0.0, 0.0], 1.0), n_mc=100)
        assert est.value == pytest.approx(0.5, abs=1e-12)

    def test_against_large_oracle(self):
        mu = gaussian([0.0, 0.0], 1.0)
        m, M = linear_sigmoid([1.0, 0.0]), linear_sigmoid([1.1, 0.0])
        est = l2_model_distance(m, M, mu, n_mc=100_000, seed=1)
        # one-dimensional in effect: integrate against the first coordinate
        oracle, _ = integrate.quad(lambda t: (1 / (1 + np.exp(-t)) - 1 / (1 + np.exp(-1.1 * t))) ** 2
                                   * stats.norm.pdf(t), -12, 12)
        assert abs(est.value - math.sqrt(oracle)) <= 3 * est.stderr + 1e-4

    def test_pseudometric(self):
        mu = gaussian([0.0, 0.0], 1.0)
        a, b, c = linear_sigmoid([1.0, 0.0]), linear_sigmoid([0.0, 2.0]), linear_sigmoid([-1.0, 1.0], 0.5)
        ab = l2_model_distance(a, b, mu, n_mc=20_000, seed=3)
        ba = l2_model_distance(b, a, mu, n_mc=20_000, seed=3)
        bc = l2_model_distance(b, c, mu, n_mc=20_000, seed=3)
        ac = l2_model_distance(a, c, mu, n_mc=20_000, seed=3)
        assert ab.value == pytest.approx(ba.value)
        assert ac.value <= ab.value + bc.value + 1e-12
        assert 0.0 <= ac.value <= 1.0


class TestDistributionConfig:

    def test_from_dict(self):
        dist = distribution_from_dict({"kind": "gaussian", "dim": 2, "mean": [0, 0], "sigma2": 0.25})
        np.testing.assert_allclose(dist.sigma2, [0.25, 0.25])
        box = distribution_from_dict({"kind": "uniform-box", "dim": 1, "bounds": [[0, 2]]})
        assert distribution_to_dict(box)["bounds"] == [[0.0, 2.0]]

    def test_declared_dim_checked(self):
        with pytest.raises(InputError):
            distribution_from_dict({"kind": "gaussian", "dim": 3, "mean": [0, 0], "sigma2": 1.0})

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            distribution_from_dict({"kind": "student-t", "dim": 1})
