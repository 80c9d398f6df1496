"""
Logistic loss with its Lipschitz/smoothness/admissibility constants, the sequential
projected GD trainer and checks of the update-rule properties used for retraining bounds.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from utils.errors import BoundViolationError, ConfigError, PerturbationSpecError, ProblemSpecError
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

LOSS_KINDS = ("logistic", "constant")
NORM_SLACK = 1e-12


@dataclass(frozen=True)
class LossFunction:
    """
    Loss f(theta; z) on the instance ball ||x||_2 <= B and hypothesis ball ||theta||_2 <= 1.

    logistic: ln(1 + exp(-y x.theta)) with L = B/(e^-B + 1), alpha = B^2/4, xi = 1/(e^B + 1)
    constant: zero loss and zero gradient, a stub for ablations
    """
    kind: str = "logistic"
    B: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ProblemSpecError(f"unknown loss kind '{self.kind}'")
        if not self.B > 0.0:
            raise ProblemSpecError("instance-norm bound B must be positive")

    @property
    def L(self):
        return 0.0 if self.kind == "constant" else self.B / (np.exp(-self.B) + 1.0)

    @property
    def alpha(self):
        return 0.0 if self.kind == "constant" else self.B ** 2 / 4.0

    @property
    def xi(self):
        return 0.0 if self.kind == "constant" else 1.0 / (np.exp(self.B) + 1.0)

    @property
    def max_step(self):
        """Largest step size 2/alpha for which GD stays 1-expansive."""
        return float("inf") if self.alpha == 0.0 else 2.0 / self.alpha


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered labeled dataset; rows of X with labels y in {-1, +1}."""
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ProblemSpecError("X and y must have the same number of rows")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ProblemSpecError("labels must be -1 or +1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def example(self, i):
        return LabeledExample(self.X[i], float(self.y[i]))


@dataclass(frozen=True)
class BoundedProblem:
    B: float
    loss: LossFunction
    theta_bound: float = 1.0

    def __post_init__(self):
        if self.loss.B != self.B:
            raise ProblemSpecError("loss constants must be derived from the problem's B")


@dataclass(frozen=True, eq=False)
class TrainingTrace:
    """theta_1 .. theta_{n+1}, step sizes eta_1 .. eta_n and the example visited at each step."""
    thetas: np.ndarray
    step_sizes: np.ndarray
    example_indices: np.ndarray
    divergence: np.ndarray = None

    @property
    def final(self):
        return self.thetas[-1]


@dataclass(frozen=True, eq=False)
class JointDivergence:
    trace1: TrainingTrace
    trace2: TrainingTrace
    deltas: np.ndarray
    bound: float
    differing: tuple
    prefix_bounds: np.ndarray


def bounded_problem(B=1.0, kind="logistic"):
    return BoundedProblem(B=float(B), loss=LossFunction(kind=kind, B=float(B)))


def project_to_ball(theta, radius=1.0):
    """Euclidean projection onto {||theta||_2 <= radius}; rows are projected independently."""
    theta = np.asarray(theta, dtype=float)
    norms = np.linalg.norm(theta, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return theta * scale


def _check_norm(loss, x):
    if np.linalg.norm(x) > loss.B * (1.0 + NORM_SLACK):
        raise ProblemSpecError(f"example norm {np.linalg.norm(x):.6g} exceeds B = {loss.B}")


def _loss_rows(loss, thetas, X, y):
    if loss.kind == "constant":
        return np.zeros(X.shape[0])
    t = y * np.sum(X * thetas, axis=-1)
    return np.logaddexp(0.0, -t)


def _gradient_rows(loss, thetas, X, y):
    if loss.kind == "constant":
        return np.zeros_like(X)
    t = y * np.sum(X * thetas, axis=-1)
    return (-y * expit(-t))[:, None] * X


def loss_value(loss, theta, z):
    """ln(1 + exp(-y x.theta)), evaluated with logaddexp so large margins stay finite."""
    _check_norm(loss, z.x)
    theta = np.asarray(theta, dtype=float)
    return float(_loss_rows(loss, theta[None, :], np.asarray(z.x, dtype=float)[None, :], np.array([z.y]))[0])


def loss_gradient(loss, theta, z):
    """Analytic gradient -y x sigmoid(-y x.theta)."""
    _check_norm(loss, z.x)
    theta = np.asarray(theta, dtype=float)
    return _gradient_rows(loss, theta[None, :], np.asarray(z.x, dtype=float)[None, :], np.array([z.y]))[0]


def validate_dataset(problem, data):
    norms = np.linalg.norm(data.X, axis=1)
    if np.any(norms > problem.B * (1.0 + NORM_SLACK)):
        worst = int(np.argmax(norms))
        raise ProblemSpecError(f"example {worst} has norm {norms[worst]:.6g} > B = {problem.B}")


def default_step_sizes(problem, n, eta=None):
    """Constant steps, 1/alpha unless eta is given."""
    if eta is None:
        eta = 1.0 / problem.loss.alpha if problem.loss.alpha > 0 else 1.0
    return np.full(int(n), float(eta))


def _resolve_steps(problem, step_sizes, n_steps, unsafe):
    steps = np.asarray(step_sizes, dtype=float)
    if steps.ndim == 0:
        steps = np.full(n_steps, float(steps))
    if steps.shape != (n_steps,):
        raise ConfigError(f"need {n_steps} step sizes, got {steps.shape[0]}")
    if np.any(steps < 0.0):
        raise ConfigError("step sizes must be non-negative")
    limit = problem.loss.max_step
    if np.any(steps > limit * (1.0 + 1e-12)):
        if not unsafe:
            raise ConfigError(f"step size {steps.max():.6g} exceeds 2/alpha = {limit:.6g}")
        logger.warning("unsafe step sizes up to %.6g (2/alpha = %.6g)", steps.max(), limit)
    return steps


def gd_train(problem, data, step_sizes, theta0=None, unsafe=False, epochs=1):
    """
    Sequential projected gradient descent, one example per step in dataset order.

    Args:
        problem: BoundedProblem
        data: Dataset with ||x|| <= B
        step_sizes: Scalar or one step size per step (len(data) * epochs)
        theta0: Starting point inside the unit ball (zeros by default)
        unsafe: Allow steps above 2/alpha (ablations only)
        epochs: Number of passes; bound checks only use a single pass

    Returns:
        TrainingTrace
    """
    validate_dataset(problem, data)
    n_steps = len(data) * int(epochs)
    steps = _resolve_steps(problem, step_sizes, n_steps, unsafe)
    theta = np.zeros(data.dim) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    if theta.shape != (data.dim,):
        raise ProblemSpecError("theta0 has the wrong dimension")
    if np.linalg.norm(theta) > problem.theta_bound * (1.0 + NORM_SLACK):
        raise ProblemSpecError("theta0 must lie in the hypothesis ball")

    indices = np.tile(np.arange(len(data)), int(epochs))
    thetas = np.empty((n_steps + 1, data.dim))
    thetas[0] = theta
    for t, i in enumerate(indices):
        grad = _gradient_rows(problem.loss, theta[None, :], data.X[i][None, :], data.y[i:i + 1])[0]
        theta = project_to_ball(theta - steps[t] * grad, problem.theta_bound)
        thetas[t + 1] = theta
    return TrainingTrace(thetas=thetas, step_sizes=steps, example_indices=indices)


def _uniform_ball(rng, n, d, radius):
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * (radius * rng.random(n) ** (1.0 / d))[:, None]


def _random_examples(rng, n, d, B):
    X = _uniform_ball(rng, n, d, B)
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return X, y


def _update_rows(problem, thetas, X, y, eta):
    return project_to_ball(thetas - eta * _gradient_rows(problem.loss, thetas, X, y), problem.theta_bound)


def check_expansive(loss, eta, problem, n_pairs=10_000, seed=0, dim=2):
    """
    Largest ||G(theta1) - G(theta2)|| / ||theta1 - theta2|| over sampled pairs sharing one example.

    Returns:
        Dict with max_ratio, n_pairs, eta
    """
    if eta > loss.max_step * (1.0 + 1e-12):
        raise ConfigError(f"expansivity check needs eta <= 2/alpha = {loss.max_step:.6g}")
    problem = BoundedProblem(B=problem.B, loss=loss, theta_bound=problem.theta_bound)
    rng = make_rng(seed)
    t1 = _uniform_ball(rng, n_pairs, dim, problem.theta_bound)
    t2 = _uniform_ball(rng, n_pairs, dim, problem.theta_bound)
    X, y = _random_examples(rng, n_pairs, dim, problem.B)
    gap = np.linalg.norm(t1 - t2, axis=1)
    keep = gap >= 1e-8
    moved = np.linalg.norm(_update_rows(problem, t1[keep], X[keep], y[keep], eta)
                           - _update_rows(problem, t2[keep], X[keep], y[keep], eta), axis=1)
    ratio = float(np.max(moved / gap[keep]))
    return {"max_ratio": ratio, "n_pairs": int(keep.sum()), "eta": float(eta)}


def check_bounded(loss, eta, problem, n_samples=10_000, seed=0, dim=2):
    """
    Largest ||theta - G(theta)|| over sampled (theta, z); should not exceed eta * L.

    Returns:
        Dict with max_step, bound (eta * L), eta
    """
    problem = BoundedProblem(B=problem.B, loss=loss, theta_bound=problem.theta_bound)
    rng = make_rng(seed)
    thetas = _uniform_ball(rng, n_samples, dim, problem.theta_bound)
    X, y = _random_examples(rng, n_samples, dim, problem.B)
    moved = np.linalg.norm(thetas - _update_rows(problem, thetas, X, y, eta), axis=1)
    return {"max_step": float(np.max(moved)), "bound": float(eta * loss.L), "eta": float(eta)}


def check_loss_constants(loss, n_triples=100_000, seed=0, slack=1e-9, dim=2):
    """
    Sample (theta1, theta2, z) triples and count violations of the L-Lipschitz,
    alpha-smooth and left xi-admissible (against the margin) inequalities.
    """
    rng = make_rng(seed)
    t1 = _uniform_ball(rng, n_triples, dim, 1.0)
    t2 = _uniform_ball(rng, n_triples, dim, 1.0)
    X, y = _random_examples(rng, n_triples, dim, loss.B)
    gap = np.linalg.norm(t1 - t2, axis=1)
    f_gap = np.abs(_loss_rows(loss, t1, X, y) - _loss_rows(loss, t2, X, y))
    g_gap = np.linalg.norm(_gradient_rows(loss, t1, X, y) - _gradient_rows(loss, t2, X, y), axis=1)
    c_gap = np.abs(np.sum(X * t1, axis=1) - np.sum(X * t2, axis=1))
    return {
        "n_triples": int(n_triples),
        "lipschitz_violations": int(np.sum(f_gap > loss.L * gap + slack)),
        "smoothness_violations": int(np.sum(g_gap > loss.alpha * gap + slack)),
        "admissibility_violations": int(np.sum(f_gap < loss.xi * c_gap - slack)),
    }


def gradient_check(loss, n_points=1_000, seed=0, h=1e-6, dim=2):
    """Worst relative gap between the analytic gradient and central finite differences."""
    rng = make_rng(seed)
    thetas = _uniform_ball(rng, n_points, dim, 1.0)
    direction = rng.standard_normal((n_points, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    X = direction * (loss.B * rng.uniform(0.1, 1.0, n_points))[:, None]
    y = np.where(rng.random(n_points) < 0.5, -1.0, 1.0)
    analytic = _gradient_rows(loss, thetas, X, y)
    numeric = np.empty_like(analytic)
    for j in range(dim):
        step = np.zeros(dim)
        step[j] = h
        numeric[:, j] = (_loss_rows(loss, thetas + step, X, y) - _loss_rows(loss, thetas - step, X, y)) / (2.0 * h)
    err = np.linalg.norm(analytic - numeric, axis=1) / np.maximum(np.linalg.norm(analytic, axis=1), 1e-8)
    return {"max_relative_error": float(np.max(err)), "n_points": int(n_points), "h": float(h)}


def differing_positions(S1, S2):
    """0-based step indices at which two equally long datasets hold different examples."""
    if len(S1) != len(S2) or S1.dim != S2.dim:
        raise PerturbationSpecError("perturbed datasets must have the same length and dimension")
    rows = np.any(S1.X != S2.X, axis=1) | (S1.y != S2.y)
    return tuple(int(i) for i in np.flatnonzero(rows))


def joint_divergence_trace(problem, S1, S2, step_sizes, theta0=None, positions=None):
    """
    Train on S1 and S2 from the same start and follow delta_t = ||theta^m_t - theta^M_t||.

    Shared steps may not increase delta; each differing step may add at most
    2 * eta_t * L. The analytic bound is 2L times the sum of eta_t over the
    differing steps.

    Args:
        positions: Declared perturbed positions; every actual difference must be among them

    Returns:
        JointDivergence
    """
    actual = differing_positions(S1, S2)
    if positions is None:
        positions = actual
    else:
        positions = tuple(sorted(int(p) for p in positions))
        stray = set(actual) - set(positions)
        if stray:
            raise PerturbationSpecError(f"datasets also differ at undeclared positions {sorted(stray)}")
        if any(p < 0 or p >= len(S1) for p in positions):
            raise PerturbationSpecError("perturbed positions out of range")

    trace1 = gd_train(problem, S1, step_sizes, theta0)
    trace2 = gd_train(problem, S2, step_sizes, theta0)
    deltas = np.linalg.norm(trace1.thetas - trace2.thetas, axis=1)
    L = problem.loss.L
    increments = np.zeros(len(S1))
    increments[list(positions)] = 2.0 * trace1.step_sizes[list(positions)] * L
    prefix = np.concatenate([[0.0], np.cumsum(increments)])

    for t in range(len(S1)):
        if deltas[t + 1] > deltas[t] + increments[t] + 1e-12:
            raise BoundViolationError(
                f"divergence grew from {deltas[t]:.6g} to {deltas[t + 1]:.6g} at step {t} "
                f"(allowed increment {increments[t]:.6g})")

    trace1 = TrainingTrace(trace1.thetas, trace1.step_sizes, trace1.example_indices, deltas)
    trace2 = TrainingTrace(trace2.thetas, trace2.step_sizes, trace2.example_indices, deltas)
    return JointDivergence(trace1=trace1, trace2=trace2, deltas=deltas, bound=float(prefix[-1]),
                           differing=positions, prefix_bounds=prefix)


def prediction_gap_bounds(problem, delta, x_norm=None):
    """
    Upper bounds on |m(x) - M(x)| for linear-sigmoid models whose parameters are delta apart.

    margin_chain: (||x|| / 4) * delta, via the sigmoid slope and Cauchy-Schwarz
    admissibility_chain: (L / xi) * delta, via Lipschitz loss and left admissibility
    """
    x_norm = problem.B if x_norm is None else x_norm
    loss = problem.loss
    return {
        "margin_chain": float(x_norm / 4.0 * delta),
        "admissibility_chain": float(loss.L * delta / loss.xi) if loss.xi > 0 else float("inf"),
    }


def average_loss(problem, theta, data):
    thetas = np.broadcast_to(np.asarray(theta, dtype=float), data.X.shape)
    return float(np.mean(_loss_rows(problem.loss, thetas, data.X, data.y)))


def trace_to_frame(trace):
    """Long table t, eta_t, example_index, theta_0.., delta_t (when traced jointly)."""
    n = trace.step_sizes.shape[0]
    frame = pd.DataFrame({
        "t": np.arange(n + 1),
        "eta_t": np.append(trace.step_sizes, np.nan),
        "example_index": np.append(trace.example_indices, -1),
    })
    for j in range(trace.thetas.shape[1]):
        frame[f"theta_{j}"] = trace.thetas[:, j]
    if trace.divergence is not None:
        frame["delta_t"] = trace.divergence
    return frame
