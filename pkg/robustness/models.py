"""
Predictor abstraction m: X -> [0,1], the linear-sigmoid model and Lipschitz constants.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import expit, logit

from utils.errors import ConfigError, InputError
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

DECISION_THRESHOLD = 0.5
KINDS = ("linear-sigmoid", "tabulated", "wrapped")

# Distance of the perturbed near-pairs used to pick up local slope.
NEAR_PAIR_DISTANCE = 1e-3


@dataclass(frozen=True, eq=False)
class Model:
    """
    A scalar predictor with outputs in [0,1].

    linear-sigmoid: sigmoid(x.theta + bias)
    tabulated: a constant (grid is None) or linear interpolation of `values` on `grid`
    wrapped: clamp(base(x) + offset, 0, 1)
    """
    kind: str
    dim: int
    theta: np.ndarray = None
    bias: float = 0.0
    values: np.ndarray = None
    grid: tuple = None
    base: "Model" = None
    offset: float = 0.0
    lipschitz: float = None
    _interp: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown model kind '{self.kind}'")
        if int(self.dim) < 1:
            raise InputError("model dimension must be >= 1")
        if self.kind == "linear-sigmoid":
            theta = np.asarray(self.theta, dtype=float).reshape(-1)
            if theta.shape[0] != self.dim or not np.all(np.isfinite(theta)):
                raise InputError("theta must be a finite vector of length dim")
            object.__setattr__(self, "theta", theta)
            object.__setattr__(self, "bias", float(self.bias))
        elif self.kind == "tabulated":
            values = np.asarray(self.values, dtype=float)
            if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
                raise InputError("tabulated values must lie in [0,1]")
            object.__setattr__(self, "values", values)
            if self.grid is not None:
                axes = tuple(np.asarray(a, dtype=float) for a in self.grid)
                if len(axes) != self.dim or values.shape != tuple(len(a) for a in axes):
                    raise InputError("grid axes do not match the table shape")
                object.__setattr__(self, "grid", axes)
                interp = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=None)
                object.__setattr__(self, "_interp", interp)
            elif values.ndim != 0:
                raise InputError("a tabulated model without grid must hold a single constant")
        else:
            if self.base is None or self.base.dim != self.dim:
                raise InputError("wrapped model needs a base model of the same dimension")
            object.__setattr__(self, "offset", float(self.offset))
        if self.lipschitz is not None and not self.lipschitz >= 0.0:
            raise InputError("lipschitz constant must be non-negative")


@dataclass(frozen=True)
class LipschitzBound:
    """
    A Lipschitz constant.

    `estimate` marks sampled lower-bound estimates; `declared` marks a constant
    taken from the model description, checked against samples only when
    `n_pairs` > 0.
    """
    value: float
    estimate: bool = False
    n_pairs: int = 0
    declared: bool = False

    def __float__(self):
        return float(self.value)


def linear_sigmoid(theta, bias=0.0):
    """Linear-sigmoid model; its Lipschitz constant is ||theta||_2 / 4 (bias-free gradient)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return Model(kind="linear-sigmoid", dim=theta.shape[0], theta=theta, bias=bias,
                 lipschitz=float(np.linalg.norm(theta)) / 4.0)


def constant_model(value, dim):
    return Model(kind="tabulated", dim=dim, values=np.asarray(float(value)), lipschitz=0.0)


def tabulated_model(grid, values, lipschitz=None):
    """Model given by a table of probabilities on a regular grid (linear interpolation)."""
    return Model(kind="tabulated", dim=len(grid), grid=tuple(grid), values=values, lipschitz=lipschitz)


def wrapped_model(base, offset):
    """Output-shifted copy of `base`, clamped back to [0,1]."""
    return Model(kind="wrapped", dim=base.dim, base=base, offset=offset)


def _as_points(model, x):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise InputError(f"expected points of dimension {model.dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(X)):
        raise InputError("feature vectors must be finite")
    return X, single


def _unwrap(values, single):
    return float(values[0]) if single else values


def margin(model, x):
    """
    Pre-sigmoid value of the model.

    For linear-sigmoid this is x.theta + bias; other kinds report logit(m(x)).
    """
    X, single = _as_points(model, x)
    if model.kind == "linear-sigmoid":
        return _unwrap(X @ model.theta + model.bias, single)
    return _unwrap(logit(_predict_points(model, X)), single)


def _predict_points(model, X):
    if model.kind == "linear-sigmoid":
        return expit(X @ model.theta + model.bias)
    if model.kind == "tabulated":
        if model.grid is None:
            return np.full(X.shape[0], float(model.values))
        return np.clip(model._interp(X), 0.0, 1.0)
    return np.clip(_predict_points(model.base, X) + model.offset, 0.0, 1.0)


def predict(model, x):
    """
    Evaluate m(x).

    Args:
        model: Model
        x: One point of shape (d,) or a batch of shape (n, d)

    Returns:
        float in [0,1] for one point, array of shape (n,) for a batch
    """
    X, single = _as_points(model, x)
    return _unwrap(_predict_points(model, X), single)


def predict_gradient(model, x, h=1e-6):
    """Gradient of m at a single point (analytic for linear-sigmoid, central differences otherwise)."""
    X, _ = _as_points(model, x)
    point = X[0]
    if model.kind == "linear-sigmoid":
        p = float(_predict_points(model, X)[0])
        return p * (1.0 - p) * model.theta
    grad = np.zeros(model.dim)
    for j in range(model.dim):
        step = np.zeros(model.dim)
        step[j] = h
        hi = _predict_points(model, (point + step)[None, :])[0]
        lo = _predict_points(model, (point - step)[None, :])[0]
        grad[j] = (hi - lo) / (2.0 * h)
    return grad


def decision(model, x):
    """I(m(x) >= 0.5)."""
    return np.asarray(predict(model, x)) >= DECISION_THRESHOLD


def _is_constant(model):
    return model.kind == "tabulated" and model.grid is None


def _sampled_slope(model, domain, n_pairs, seed):
    """Largest |m(a) - m(b)| / ||a - b||_2 over random pairs and as many near-pairs."""
    from robustness.distributions import sample

    X = sample(domain, n_pairs, derive_seed(seed, "lipschitz", "left"))
    Y = sample(domain, n_pairs, derive_seed(seed, "lipschitz", "right"))
    rng = np.random.default_rng(derive_seed(seed, "lipschitz", "near"))
    direction = rng.standard_normal(X.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    Z = X + NEAR_PAIR_DISTANCE * direction

    best = 0.0
    for A, Bp in ((X, Y), (X, Z)):
        dist = np.linalg.norm(A - Bp, axis=1)
        keep = dist > 1e-12
        gaps = np.abs(predict(model, A[keep]) - predict(model, Bp[keep]))
        if gaps.size:
            best = max(best, float(np.max(gaps / dist[keep])))
    return best


def lipschitz_constant(model, domain=None, n_pairs=10_000, seed=0):
    """
    Lipschitz constant of a model with respect to the l2 norm.

    linear-sigmoid and constant models have exact constants. A constant declared
    on any other model is checked against sampled pairs when a domain is given
    and returned as `declared` either way. Without a declaration the constant is
    estimated from samples (a wrapped model inherits its base's constant).

    Args:
        model: Model
        domain: Distribution to sample pairs from
        n_pairs: Number of random pairs (and as many near-pairs) to sample
        seed: Seed of the sampling streams

    Returns:
        LipschitzBound; `estimate=True` marks an empirical lower bound

    Raises:
        InputError: a sampled pair violates the declared constant
        ConfigError: nothing declared and no domain to sample from
    """
    if model.kind == "linear-sigmoid":
        return LipschitzBound(float(np.linalg.norm(model.theta)) / 4.0)
    if _is_constant(model):
        return LipschitzBound(0.0)
    n_pairs = max(int(n_pairs), 10_000)
    if model.lipschitz is not None:
        declared = float(model.lipschitz)
        if domain is None:
            return LipschitzBound(declared, declared=True)
        slope = _sampled_slope(model, domain, n_pairs, seed)
        if slope > declared * (1.0 + 1e-9) + 1e-12:
            raise InputError(f"declared Lipschitz constant {declared:g} of a {model.kind} model is violated "
                             f"by a sampled pair with slope {slope:.6g}")
        return LipschitzBound(declared, n_pairs=2 * n_pairs, declared=True)
    if model.kind == "wrapped":
        # offset and clamp never increase the slope of the base
        return lipschitz_constant(model.base, domain, n_pairs, seed)
    if domain is None:
        raise ConfigError(f"no closed-form Lipschitz constant for a {model.kind} model and no sampling domain")
    best = _sampled_slope(model, domain, n_pairs, seed)
    logger.debug("empirical Lipschitz estimate %.6g from %d pairs", best, 2 * n_pairs)
    return LipschitzBound(best, estimate=True, n_pairs=2 * n_pairs)


def ensemble_lipschitz(models, domain=None, n_pairs=10_000, seed=0):
    """gamma = max of the per-model Lipschitz constants."""
    models = list(models)
    if not models:
        raise InputError("ensemble_lipschitz needs at least one model")
    return max(float(lipschitz_constant(m, domain, n_pairs, seed)) for m in models)


def parameter_distance(m, M):
    """||Params(M) - Params(m)||_2 for two linear-sigmoid models (bias included)."""
    if m.kind != "linear-sigmoid" or M.kind != "linear-sigmoid" or m.dim != M.dim:
        raise InputError("parameter distance needs two linear-sigmoid models of equal dimension")
    diff = np.append(M.theta - m.theta, M.bias - m.bias)
    return float(np.linalg.norm(diff))


def model_to_dict(model):
    """JSON-ready description {kind, dim, theta, bias, lipschitz, ...}."""
    out = {"kind": model.kind, "dim": int(model.dim)}
    if model.kind == "linear-sigmoid":
        out["theta"] = [float(v) for v in model.theta]
        out["bias"] = float(model.bias)
    elif model.kind == "tabulated":
        out["values"] = np.asarray(model.values).tolist()
        if model.grid is not None:
            out["grid"] = [a.tolist() for a in model.grid]
    else:
        out["base"] = model_to_dict(model.base)
        out["offset"] = float(model.offset)
    out["lipschitz"] = None if model.lipschitz is None else float(model.lipschitz)
    return out


def model_from_dict(data):
    kind = data.get("kind")
    dim = data.get("dim")
    if kind == "linear-sigmoid":
        model = Model(kind=kind, dim=dim, theta=data["theta"], bias=data.get("bias", 0.0),
                      lipschitz=data.get("lipschitz"))
    elif kind == "tabulated":
        model = Model(kind=kind, dim=dim, values=data["values"], grid=data.get("grid"),
                      lipschitz=data.get("lipschitz"))
    elif kind == "wrapped":
        model = Model(kind=kind, dim=dim, base=model_from_dict(data["base"]),
                      offset=data.get("offset", 0.0), lipschitz=data.get("lipschitz"))
    else:
        raise InputError(f"unknown model kind '{kind}'")
    return model
