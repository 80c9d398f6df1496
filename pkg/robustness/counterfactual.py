"""
Counterfactual generation: norm-induced (anywhere in R^d) and closest data-manifold counterfactuals.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logit

from robustness.models import DECISION_THRESHOLD, margin, predict, predict_gradient
from utils.errors import InfeasibilityError, QueryError
from utils.parallel import parallel_map

logger = logging.getLogger(__name__)

NORMS = ("l1", "l2")
MODES = ("free", "manifold")
MAX_NUDGE = 1e-9
PENALTY_ROUNDS = 40
BISECTION_STEPS = 60
DESCENT_OVERSHOOT = 1e-4
GRID_POINTS_PER_AXIS = {1: 2001, 2: 201, 3: 61}


@dataclass(frozen=True, eq=False)
class CounterfactualQuery:
    x: np.ndarray
    norm: str = "l2"
    mode: str = "free"
    manifold: np.ndarray = None
    margin_slack: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        if self.norm not in NORMS:
            raise QueryError(f"unknown norm '{self.norm}'")
        if self.mode not in MODES:
            raise QueryError(f"unknown mode '{self.mode}'")
        if not 0.0 <= self.margin_slack < 0.5:
            raise QueryError("margin slack must lie in [0, 0.5)")

    @property
    def target(self):
        return DECISION_THRESHOLD + self.margin_slack


@dataclass(frozen=True, eq=False)
class CounterfactualResult:
    xbar: np.ndarray
    cost: float
    valid: bool
    iterations: int = 0
    candidates_examined: int = 0
    method: str = ""


def distance(x, xbar, norm):
    diff = np.asarray(xbar, dtype=float) - np.asarray(x, dtype=float)
    return float(np.sum(np.abs(diff), axis=-1)) if norm == "l1" else float(np.linalg.norm(diff, axis=-1))


def _check_query(model, q):
    if q.x.shape != (model.dim,):
        raise QueryError(f"query point has dimension {q.x.shape[0]}, model expects {model.dim}")
    if predict(model, q.x) >= DECISION_THRESHOLD:
        raise QueryError("query point is already classified positive (m(x) >= 0.5)")


def _nudge(model, point, direction, target):
    """Push a point that misses the target by rounding along `direction`, by at most 1e-9."""
    if predict(model, point) >= target:
        return point
    unit = direction / np.linalg.norm(direction)
    scale = max(1.0, float(np.linalg.norm(point)))
    step = 1e-15
    while step <= MAX_NUDGE:
        candidate = point + step * scale * unit
        if predict(model, candidate) >= target:
            return candidate
        step *= 10.0
    raise InfeasibilityError("closed-form counterfactual could not be made valid by a 1e-9 nudge")


def _linear_counterfactual(model, q):
    theta = model.theta
    if not np.any(theta):
        raise InfeasibilityError("constant linear model never reaches the target")
    shortfall = logit(q.target) - margin(model, q.x)
    if q.norm == "l2":
        xbar = q.x + shortfall / float(theta @ theta) * theta
        direction = theta
    else:
        # the l1 optimum moves only the coordinate with the largest |theta_j|
        j = int(np.argmax(np.abs(theta)))
        xbar = q.x.copy()
        xbar[j] += shortfall / theta[j]
        direction = np.zeros_like(theta)
        direction[j] = np.sign(theta[j])
    return _nudge(model, xbar, direction, q.target)


def _bisect(model, x, feasible, target):
    """Smallest step along [x, feasible] that still meets the target."""
    lo, hi = 0.0, 1.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if predict(model, x + mid * (feasible - x)) >= target:
            hi = mid
        else:
            lo = mid
    return x + hi * (feasible - x)


def _penalized_descent(model, q):
    x, target = q.x, q.target
    # quadratic-penalty minimizers sit just short of their target, so aim a little past it
    aim = min(target + DESCENT_OVERSHOOT, 1.0 - 1e-12)

    def cost(z):
        diff = z - x
        return float(np.sum(np.abs(diff))) if q.norm == "l1" else float(diff @ diff)

    def squared_l2_jac(v, lam):
        short = max(0.0, aim - predict(model, v))
        return 2.0 * (v - x) - 2.0 * lam * short * predict_gradient(model, v)

    z = x.copy()
    lam = 1.0
    for round_ in range(1, PENALTY_ROUNDS + 1):
        def objective(v, lam=lam):
            short = max(0.0, aim - predict(model, v))
            return cost(v) + lam * short ** 2

        if q.norm == "l1":
            z = minimize(objective, z, method="Powell").x
        else:
            z = minimize(objective, z, jac=lambda v, lam=lam: squared_l2_jac(v, lam), method="L-BFGS-B").x
        if predict(model, z) >= target:
            logger.debug("penalized descent feasible after %d rounds (lambda=%g)", round_, lam)
            return z, round_
        lam *= 2.0
    return None, PENALTY_ROUNDS


def _grid_search(model, q, radius=5.0):
    """Brute-force scan of a box around x for d <= 3."""
    n = GRID_POINTS_PER_AXIS[model.dim]
    axes = [np.linspace(c - radius, c + radius, n) for c in q.x]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    ok = np.asarray(predict(model, mesh)) >= q.target
    if not np.any(ok):
        return None, mesh.shape[0]
    costs = np.array([distance(q.x, p, q.norm) for p in mesh[ok]])
    return mesh[ok][int(np.argmin(costs))], mesh.shape[0]


def find_counterfactual_free(model, q):
    """
    Closest point anywhere in R^d with m(xbar) >= 0.5 + margin_slack.

    linear-sigmoid: exact hyperplane projection (l2) or single-coordinate move (l1).
    Otherwise: penalized descent on cost + lambda * max(0, target - m)^2 with
    lambda doubling until feasible (grid scan as fallback for d <= 3), then
    bisection along [x, xbar] to tighten the cost.

    Returns:
        CounterfactualResult
    """
    _check_query(model, q)
    if model.kind == "linear-sigmoid":
        xbar = _linear_counterfactual(model, q)
        return CounterfactualResult(xbar=xbar, cost=distance(q.x, xbar, q.norm), valid=True,
                                    iterations=0, method=f"closed-form-{q.norm}")

    feasible, rounds = _penalized_descent(model, q)
    examined = 0
    method = "penalized-descent"
    if feasible is None:
        if model.dim > 3:
            raise InfeasibilityError(f"no point with m >= {q.target:g} found in {rounds} penalty rounds")
        feasible, examined = _grid_search(model, q)
        method = "grid-scan"
        if feasible is None:
            raise InfeasibilityError(f"model stays below {q.target:g} on the search box")
    xbar = _bisect(model, q.x, feasible, q.target)
    return CounterfactualResult(xbar=xbar, cost=distance(q.x, xbar, q.norm),
                                valid=bool(predict(model, xbar) >= q.target),
                                iterations=rounds + BISECTION_STEPS, candidates_examined=examined,
                                method=method)


def find_counterfactual_manifold(model, q):
    """
    Closest dataset point with m >= 0.5 + margin_slack; ties go to the lowest index.

    Returns:
        CounterfactualResult
    """
    _check_query(model, q)
    if q.manifold is None or len(q.manifold) == 0:
        raise QueryError("manifold mode needs a non-empty candidate set")
    candidates = np.atleast_2d(np.asarray(q.manifold, dtype=float))
    ok = np.asarray(predict(model, candidates)) >= q.target
    if not np.any(ok):
        raise InfeasibilityError("no candidate in the manifold set is classified positive")
    diff = candidates - q.x
    costs = np.sum(np.abs(diff), axis=1) if q.norm == "l1" else np.linalg.norm(diff, axis=1)
    costs = np.where(ok, costs, np.inf)
    best = int(np.argmin(costs))
    return CounterfactualResult(xbar=candidates[best].copy(), cost=float(costs[best]), valid=True,
                                candidates_examined=int(candidates.shape[0]), method="manifold-scan")


def find_counterfactual(model, q):
    if q.mode == "manifold":
        return find_counterfactual_manifold(model, q)
    return find_counterfactual_free(model, q)


def find_counterfactuals(model, queries, jobs=1):
    """Batch version; results keep the query order."""
    return parallel_map(lambda q: find_counterfactual(model, q), queries, jobs)
