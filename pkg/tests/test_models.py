"""
Tests for the predictor abstraction and Lipschitz constants.
"""
import math

import numpy as np
import pytest

from robustness.distributions import gaussian, uniform_box
from robustness.models import (DECISION_THRESHOLD, constant_model, decision, ensemble_lipschitz,
                               lipschitz_constant, linear_sigmoid, margin, model_from_dict, model_to_dict,
                               parameter_distance, predict, predict_gradient, tabulated_model, wrapped_model)
from utils.errors import ConfigError, InputError


class TestPredict:

    def test_zero_margin_is_one_half(self):
        assert predict(linear_sigmoid([1.0, 0.0]), np.array([0.0, 5.0])) == 0.5

    def test_sigmoid_value(self):
        value = predict(linear_sigmoid([1.0, 0.0]), np.array([2.0, 0.0]))
        assert value == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)
        assert value == pytest.approx(0.880797, abs=1e-6)

    def test_constant_model(self):
        rng = np.random.default_rng(42)
        m = constant_model(0.8, 3)
        np.testing.assert_allclose(predict(m, rng.normal(size=(20, 3))), 0.8)

    def test_batch_shape_and_range(self):
        rng = np.random.default_rng(42)
        m = linear_sigmoid([30.0, -20.0], 5.0)
        out = predict(m, rng.normal(size=(1000, 2)) * 10)
        assert out.shape == (1000,)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            predict(linear_sigmoid([1.0, 0.0]), np.array([1.0, 2.0, 3.0]))

    def test_non_finite_input(self):
        with pytest.raises(InputError):
            predict(linear_sigmoid([1.0, 0.0]), np.array([np.nan, 0.0]))

    def test_wrapped_clamps(self):
        base = linear_sigmoid([1.0])
        assert predict(wrapped_model(base, 0.3), np.array([10.0])) == 1.0
        assert predict(wrapped_model(base, -0.3), np.array([-10.0])) == 0.0
        assert predict(wrapped_model(base, 0.1), np.array([0.0])) == pytest.approx(0.6)

    def test_tabulated_interpolates(self):
        grid = (np.array([0.0, 1.0]),)
        m = tabulated_model(grid, np.array([0.2, 0.6]))
        assert predict(m, np.array([0.5])) == pytest.approx(0.4)

    def test_tabulated_rejects_out_of_range_values(self):
        with pytest.raises(InputError):
            tabulated_model((np.array([0.0, 1.0]),), np.array([0.2, 1.5]))

    def test_decision_threshold(self):
        assert DECISION_THRESHOLD == 0.5
        m = linear_sigmoid([1.0])
        assert bool(decision(m, np.array([0.0])))
        assert not bool(decision(m, np.array([-1e-9])))

    def test_margin_of_linear_model(self):
        m = linear_sigmoid([2.0, -1.0], 0.5)
        assert margin(m, np.array([1.0, 1.0])) == pytest.approx(1.5)


class TestGradient:

    def test_linear_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        m = linear_sigmoid([1.5, -0.5], 0.2)
        for _ in range(20):
            x = rng.normal(size=2)
            h = 1e-6
            numeric = np.array([(predict(m, x + h * e) - predict(m, x - h * e)) / (2 * h) for e in np.eye(2)])
            np.testing.assert_allclose(predict_gradient(m, x), numeric, rtol=1e-6, atol=1e-10)

    def test_constant_gradient_is_zero(self):
        np.testing.assert_allclose(predict_gradient(constant_model(0.3, 2), np.zeros(2)), 0.0)


class TestLipschitz:

    def test_closed_form(self):
        assert float(lipschitz_constant(linear_sigmoid([4.0, 0.0]))) == 1.0
        assert float(lipschitz_constant(linear_sigmoid([3.0, 4.0]))) == pytest.approx(1.25)

    def test_constant_model(self):
        assert float(lipschitz_constant(constant_model(0.4, 2))) == 0.0

    def test_empirical_estimate_below_closed_form(self):
        m = linear_sigmoid([3.0, 4.0])
        stripped = model_from_dict({"kind": "wrapped", "dim": 2, "base": model_to_dict(m), "offset": 0.0})
        assert float(lipschitz_constant(stripped)) == pytest.approx(1.25)
        grid = (np.linspace(-3, 3, 61), np.linspace(-3, 3, 61))
        A, B = np.meshgrid(*grid, indexing="ij")
        values = 1.0 / (1.0 + np.exp(-(3.0 * A + 4.0 * B)))
        table = tabulated_model(grid, values)
        estimate = lipschitz_constant(table, domain=uniform_box([-1, -1], [1, 1]), seed=3)
        assert estimate.estimate
        assert float(estimate) <= 1.25 + 1e-9
        assert float(estimate) > 0.5

    def test_gaussian_domain_estimate(self):
        grid = (np.linspace(-4, 4, 9),)
        table = tabulated_model(grid, np.linspace(0.1, 0.9, 9))
        assert 0.0 < float(lipschitz_constant(table, domain=gaussian([0.0], 1.0))) <= 0.1 + 1e-9

    def test_no_domain_for_tabulated(self):
        grid = (np.array([0.0, 1.0]),)
        with pytest.raises(ConfigError):
            lipschitz_constant(tabulated_model(grid, np.array([0.1, 0.9])))

    def test_declared_constant_on_table(self):
        grid = (np.linspace(-1, 1, 41), np.linspace(-1, 1, 41))
        A, _ = np.meshgrid(*grid, indexing="ij")
        values = 1.0 / (1.0 + np.exp(-5.0 * A))
        box = uniform_box([-1, -1], [1, 1])
        with pytest.raises(InputError):
            lipschitz_constant(tabulated_model(grid, values, lipschitz=0.01), domain=box, seed=1)
        unchecked = lipschitz_constant(tabulated_model(grid, values, lipschitz=0.01))
        assert unchecked.declared and unchecked.n_pairs == 0
        checked = lipschitz_constant(tabulated_model(grid, values, lipschitz=1.25), domain=box, seed=1)
        assert checked.declared and not checked.estimate
        assert float(checked) == 1.25 and checked.n_pairs > 0

    def test_wrapped_table_checks_its_base(self):
        grid = (np.linspace(-1, 1, 21),)
        base = tabulated_model(grid, np.linspace(0.0, 1.0, 21), lipschitz=0.1)
        with pytest.raises(InputError):
            lipschitz_constant(wrapped_model(base, 0.05), domain=uniform_box([-1], [1]))

    def test_declared_constant_holds_on_samples(self):
        rng = np.random.default_rng(42)
        m = linear_sigmoid([2.0, -1.0], 0.3)
        gamma = float(lipschitz_constant(m))
        X = rng.normal(size=(5000, 2))
        Y = rng.normal(size=(5000, 2))
        gaps = np.abs(predict(m, X) - predict(m, Y))
        assert np.all(gaps <= gamma * np.linalg.norm(X - Y, axis=1) + 1e-12)

    def test_ensemble_max(self):
        assert ensemble_lipschitz([linear_sigmoid([4.0, 0.0]), linear_sigmoid([2.0, 0.0])]) == 1.0
        assert ensemble_lipschitz([linear_sigmoid([2.0, 0.0])]) == 0.5

    def test_ensemble_of_random_models(self):
        rng = np.random.default_rng(42)
        thetas = rng.normal(size=(10, 3))
        expected = max(np.linalg.norm(t) / 4.0 for t in thetas)
        assert ensemble_lipschitz([linear_sigmoid(t) for t in thetas]) == pytest.approx(expected)

    def test_empty_ensemble(self):
        with pytest.raises(InputError):
            ensemble_lipschitz([])


class TestSerialization:

    def test_model_dict_is_exact(self):
        m = linear_sigmoid([0.1, 1.0 / 3.0], -0.7)
        back = model_from_dict(model_to_dict(m))
        assert back.kind == m.kind
        np.testing.assert_array_equal(back.theta, m.theta)
        assert back.bias == m.bias

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            model_from_dict({"kind": "forest", "dim": 2})

    def test_parameter_distance(self):
        m = linear_sigmoid([1.0, 0.0], 0.0)
        M = linear_sigmoid([1.0, 3.0], 4.0)
        assert parameter_distance(m, M) == pytest.approx(5.0)

