"""
Tests for the logistic loss, the sequential trainer and the update-rule checks.
"""
import math

import numpy as np
import pytest

from robustness.models import linear_sigmoid, predict
from robustness.training import (Dataset, LabeledExample, LossFunction, average_loss, bounded_problem,
                                 check_bounded, check_expansive, check_loss_constants, default_step_sizes,
                                 differing_positions, gd_train, gradient_check, joint_divergence_trace,
                                 loss_gradient, loss_value, prediction_gap_bounds, project_to_ball,
                                 trace_to_frame)
from utils.errors import ConfigError, PerturbationSpecError, ProblemSpecError


def _ball_dataset(n, seed, B=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    X *= (B * rng.uniform(0.2, 1.0, n) / np.linalg.norm(X, axis=1))[:, None]
    y = np.where(X @ np.array([1.0, -0.5]) >= 0, 1.0, -1.0)
    return Dataset(X, y)


class TestLossConstants:

    def test_logistic_constants(self):
        loss = LossFunction(B=1.0)
        assert loss.L == pytest.approx(1.0 / (math.exp(-1.0) + 1.0))
        assert loss.L == pytest.approx(0.7311, abs=1e-4)
        assert loss.alpha == pytest.approx(0.25)
        assert loss.xi == pytest.approx(1.0 / (math.e + 1.0))
        assert loss.max_step == pytest.approx(8.0)

    def test_sampled_inequalities(self):
        report = check_loss_constants(LossFunction(B=1.0), n_triples=100_000, seed=0)
        assert report["lipschitz_violations"] == 0
        assert report["smoothness_violations"] == 0
        assert report["admissibility_violations"] == 0

    def test_larger_B(self):
        report = check_loss_constants(LossFunction(B=3.0), n_triples=20_000, seed=1)
        assert report["lipschitz_violations"] == report["smoothness_violations"] == 0
        assert report["admissibility_violations"] == 0

    def test_bad_B(self):
        with pytest.raises(ProblemSpecError):
            LossFunction(B=0.0)


class TestLoss:

    def test_zero_theta(self):
        z = LabeledExample(np.array([0.6, 0.0]), -1.0)
        assert loss_value(LossFunction(), np.zeros(2), z) == pytest.approx(math.log(2.0))

    def test_values(self):
        loss = LossFunction(B=1.0)
        theta = np.array([1.0, 0.0])
        assert loss_value(loss, theta, LabeledExample(np.array([1.0, 0.0]), 1.0)) == pytest.approx(0.313262, abs=1e-6)
        assert loss_value(loss, theta, LabeledExample(np.array([1.0, 0.0]), -1.0)) == pytest.approx(1.313262, abs=1e-6)

    def test_norm_violation(self):
        with pytest.raises(ProblemSpecError):
            loss_value(LossFunction(B=1.0), np.zeros(2), LabeledExample(np.array([1.0, 1.0]), 1.0))

    def test_gradient_at_zero(self):
        grad = loss_gradient(LossFunction(), np.zeros(2), LabeledExample(np.array([1.0, 0.0]), 1.0))
        np.testing.assert_allclose(grad, [-0.5, 0.0])

    def test_gradient_matches_finite_differences(self):
        report = gradient_check(LossFunction(B=1.0), n_points=1_000, seed=0)
        assert report["max_relative_error"] <= 1e-6

    def test_saturated_gradient(self):
        loss = LossFunction(B=100.0)
        x = np.array([100.0, 0.0])
        grad = loss_gradient(loss, np.array([1.0, 0.0]), LabeledExample(x, 1.0))
        assert np.linalg.norm(grad) < 1e-8 * np.linalg.norm(x)
        assert np.isfinite(loss_value(loss, np.array([-1.0, 0.0]), LabeledExample(x, 1.0)))


class TestTrainer:

    def test_single_step(self):
        problem = bounded_problem(1.0)
        data = Dataset(np.array([[1.0, 0.0]]), np.array([1.0]))
        trace = gd_train(problem, data, [0.1])
        np.testing.assert_allclose(trace.thetas[0], [0.0, 0.0])
        np.testing.assert_allclose(trace.thetas[1], [0.05, 0.0])

    def test_empty_dataset(self):
        data = Dataset(np.zeros((0, 2)), np.zeros(0))
        theta0 = np.array([0.1, -0.2])
        trace = gd_train(bounded_problem(1.0), data, 0.1, theta0=theta0)
        assert trace.thetas.shape == (1, 2)
        np.testing.assert_array_equal(trace.final, theta0)

    def test_deterministic(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(40, seed=42)
        steps = default_step_sizes(problem, len(data))
        a = gd_train(problem, data, steps)
        b = gd_train(problem, data, steps)
        np.testing.assert_array_equal(a.thetas, b.thetas)
        assert a.thetas.shape[0] == a.step_sizes.shape[0] + 1

    def test_iterates_stay_in_ball(self):
        problem = bounded_problem(1.0)
        trace = gd_train(problem, _ball_dataset(100, seed=3), 8.0)
        assert np.all(np.linalg.norm(trace.thetas, axis=1) <= 1.0 + 1e-12)

    def test_update_rule(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(10, seed=5)
        trace = gd_train(problem, data, 2.0)
        for t in range(len(data)):
            grad = loss_gradient(problem.loss, trace.thetas[t], data.example(t))
            expected = project_to_ball(trace.thetas[t] - 2.0 * grad)
            np.testing.assert_allclose(trace.thetas[t + 1], expected, rtol=0, atol=1e-15)

    def test_step_size_limit(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(5, seed=1)
        with pytest.raises(ConfigError):
            gd_train(problem, data, 9.0)
        trace = gd_train(problem, data, 9.0, unsafe=True)
        assert trace.thetas.shape == (6, 2)

    def test_step_count_checked(self):
        with pytest.raises(ConfigError):
            gd_train(bounded_problem(1.0), _ball_dataset(5, seed=1), [0.1, 0.1])

    def test_theta0_outside_ball(self):
        with pytest.raises(ProblemSpecError):
            gd_train(bounded_problem(1.0), _ball_dataset(5, seed=1), 0.1, theta0=np.array([1.0, 1.0]))

    def test_example_outside_ball(self):
        data = Dataset(np.array([[2.0, 0.0]]), np.array([1.0]))
        with pytest.raises(ProblemSpecError):
            gd_train(bounded_problem(1.0), data, 0.1)

    def test_loss_decreases_on_separable_data(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(200, seed=7)
        trace = gd_train(problem, data, default_step_sizes(problem, len(data)))
        assert average_loss(problem, trace.final, data) <= average_loss(problem, trace.thetas[0], data)

    def test_multiple_epochs(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(6, seed=2)
        trace = gd_train(problem, data, 0.5, epochs=3)
        assert trace.thetas.shape == (19, 2)
        np.testing.assert_array_equal(trace.example_indices, np.tile(np.arange(6), 3))

    def test_trace_frame(self):
        problem = bounded_problem(1.0)
        frame = trace_to_frame(gd_train(problem, _ball_dataset(4, seed=2), 0.5))
        assert list(frame.columns) == ["t", "eta_t", "example_index", "theta_0", "theta_1"]
        assert len(frame) == 5


class TestUpdateRuleChecks:

    def test_zero_step_is_identity(self):
        report = check_expansive(LossFunction(), 0.0, bounded_problem(1.0), n_pairs=1_000)
        assert report["max_ratio"] == 1.0

    def test_one_expansive_at_limit(self):
        loss = LossFunction(B=1.0)
        report = check_expansive(loss, 2.0 / loss.alpha, bounded_problem(1.0), n_pairs=10_000)
        assert report["max_ratio"] <= 1.0 + 1e-9

    def test_expansive_rejects_large_step(self):
        with pytest.raises(ConfigError):
            check_expansive(LossFunction(), 9.0, bounded_problem(1.0))

    def test_bounded(self):
        loss = LossFunction(B=1.0)
        assert check_bounded(loss, 0.0, bounded_problem(1.0))["max_step"] == 0.0
        report = check_bounded(loss, 0.1, bounded_problem(1.0))
        assert report["max_step"] <= 0.1 * loss.L + 1e-12
        assert report["bound"] == pytest.approx(0.0731, abs=1e-4)

    def test_constant_loss_never_moves(self):
        problem = bounded_problem(1.0, kind="constant")
        assert check_bounded(problem.loss, 0.5, problem)["max_step"] == 0.0


class TestJointDivergence:

    def test_identical_datasets(self):
        problem = bounded_problem(1.0)
        data = _ball_dataset(20, seed=4)
        joint = joint_divergence_trace(problem, data, data, 0.5)
        assert joint.bound == 0.0
        assert np.all(joint.deltas == 0.0)
        assert joint.differing == ()

    def test_last_example_differs(self):
        problem = bounded_problem(1.0)
        S1 = _ball_dataset(20, seed=4)
        X2, y2 = S1.X.copy(), S1.y.copy()
        X2[-1] = -X2[-1]
        S2 = Dataset(X2, y2)
        joint = joint_divergence_trace(problem, S1, S2, 0.1, positions=[19])
        assert joint.bound == pytest.approx(2 * problem.loss.L * 0.1)
        assert joint.bound == pytest.approx(0.1462, abs=1e-4)
        assert joint.deltas[-1] <= joint.bound + 1e-12
        assert np.all(joint.deltas[:-1] == 0.0)

        m, M = linear_sigmoid(joint.trace1.final), linear_sigmoid(joint.trace2.final)
        rng = np.random.default_rng(42)
        X = rng.normal(size=(500, 2))
        X /= np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]
        gaps = np.abs(predict(m, X) - predict(M, X))
        chains = prediction_gap_bounds(problem, joint.deltas[-1])
        assert gaps.max() <= chains["margin_chain"] + 1e-12
        assert chains["margin_chain"] <= chains["admissibility_chain"]

    def test_recursion_with_several_differences(self):
        problem = bounded_problem(1.0)
        S1 = _ball_dataset(30, seed=8)
        S2 = _ball_dataset(30, seed=9)
        X2 = S1.X.copy()
        y2 = S1.y.copy()
        X2[[3, 17, 29]] = S2.X[[3, 17, 29]]
        y2[[3, 17, 29]] = S2.y[[3, 17, 29]]
        joint = joint_divergence_trace(problem, S1, Dataset(X2, y2), 4.0)
        assert joint.differing == (3, 17, 29)
        steps = np.diff(joint.deltas)
        shared = np.setdiff1d(np.arange(30), [3, 17, 29])
        assert np.all(steps[shared] <= 1e-12)
        assert joint.deltas[-1] <= joint.bound + 1e-12

    def test_undeclared_difference(self):
        S1 = _ball_dataset(10, seed=1)
        S2 = _ball_dataset(10, seed=2)
        with pytest.raises(PerturbationSpecError):
            joint_divergence_trace(bounded_problem(1.0), S1, S2, 0.1, positions=[9])

    def test_length_mismatch(self):
        with pytest.raises(PerturbationSpecError):
            differing_positions(_ball_dataset(10, seed=1), _ball_dataset(9, seed=1))
