"""
Analytic-density distributions over feature space.
Sampling, closed-form densities, the density-ratio norm kappa and the L2(mu) model distance.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from robustness.models import predict
from utils.errors import AbsoluteContinuityError, InputError, NonIntegrableWarning
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

KINDS = ("gaussian", "gaussian-mixture", "uniform-box")
DEFAULT_N_MC = 100_000


@dataclass(frozen=True, eq=False)
class Distribution:
    """
    A distribution with a closed-form density.

    gaussian: mean and diagonal variances sigma2
    gaussian-mixture: weights over gaussian components
    uniform-box: independent uniforms on [low_j, high_j]
    """
    kind: str
    dim: int
    mean: np.ndarray = None
    sigma2: np.ndarray = None
    weights: np.ndarray = None
    components: tuple = None
    low: np.ndarray = None
    high: np.ndarray = None


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""
    value: float
    stderr: float
    n: int
    reliable: bool = True

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True, eq=False)
class LabeledDistribution:
    """Marginal over X plus a labeler giving P(y = +1 | x)."""
    marginal: Distribution
    labeler: object


def gaussian(mean, sigma2):
    """Gaussian with isotropic (scalar sigma2) or diagonal (vector sigma2) covariance."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), mean.shape).copy()
    if not np.all(np.isfinite(mean)) or np.any(sigma2 <= 0.0) or not np.all(np.isfinite(sigma2)):
        raise InputError("gaussian needs a finite mean and positive variances")
    return Distribution(kind="gaussian", dim=mean.shape[0], mean=mean, sigma2=sigma2)


def gaussian_mixture(weights, components):
    weights = np.asarray(weights, dtype=float)
    components = tuple(components)
    if len(components) == 0 or weights.shape != (len(components),):
        raise InputError("one weight per mixture component is required")
    if np.any(weights <= 0.0) or abs(float(weights.sum()) - 1.0) > 1e-9:
        raise InputError("mixture weights must be positive and sum to 1")
    if any(c.kind != "gaussian" for c in components):
        raise InputError("mixture components must be gaussian")
    dims = {c.dim for c in components}
    if len(dims) != 1:
        raise InputError("mixture components must share one dimension")
    return Distribution(kind="gaussian-mixture", dim=dims.pop(), weights=weights, components=components)


def uniform_box(low, high):
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    if low.shape != high.shape or not np.all(high > low):
        raise InputError("uniform box needs low < high in every coordinate")
    return Distribution(kind="uniform-box", dim=low.shape[0], low=low, high=high)


def sample(dist, n, seed):
    """
    Draw n i.i.d. points.

    Args:
        dist: Distribution
        n: Number of draws (>= 1)
        seed: int or tuple of ints; identical seeds give bit-identical draws

    Returns:
        Array of shape (n, dim)
    """
    n = int(n)
    if n < 1:
        raise InputError("sample size must be >= 1")
    rng = make_rng(seed)
    if dist.kind == "gaussian":
        return dist.mean + np.sqrt(dist.sigma2) * rng.standard_normal((n, dist.dim))
    if dist.kind == "uniform-box":
        return dist.low + (dist.high - dist.low) * rng.random((n, dist.dim))
    labels = rng.choice(len(dist.components), size=n, p=dist.weights)
    Z = rng.standard_normal((n, dist.dim))
    means = np.stack([c.mean for c in dist.components])
    scales = np.sqrt(np.stack([c.sigma2 for c in dist.components]))
    return means[labels] + scales[labels] * Z


def _as_points(dist, x):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != dist.dim:
        raise InputError(f"expected points of dimension {dist.dim}, got shape {np.shape(x)}")
    return X, single


def _log_density_points(dist, X):
    if dist.kind == "gaussian":
        z = (X - dist.mean) ** 2 / dist.sigma2
        return -0.5 * np.sum(z + np.log(2.0 * np.pi * dist.sigma2), axis=1)
    if dist.kind == "uniform-box":
        inside = np.all((X >= dist.low) & (X <= dist.high), axis=1)
        logv = -float(np.sum(np.log(dist.high - dist.low)))
        return np.where(inside, logv, -np.inf)
    parts = np.stack([np.log(w) + _log_density_points(c, X)
                      for w, c in zip(dist.weights, dist.components)])
    return logsumexp(parts, axis=0)


def log_density(dist, x):
    X, single = _as_points(dist, x)
    out = _log_density_points(dist, X)
    return float(out[0]) if single else out


def density(dist, x):
    """Closed-form density; zero outside the support of a uniform box."""
    return np.exp(log_density(dist, x))


def _gaussian_pair_status(g_tilde, g):
    ratio = g_tilde.sigma2 / g.sigma2
    return bool(np.all(ratio < 2.0)), bool(np.all(ratio < 1.5))


def _ratio_status(mu_tilde, mu):
    """
    (support_ok, integrable, finite_variance) for the supported kind pairs.

    integrable is about the integral of p~^2/p; finite_variance about the
    estimator's second moment, the integral of p~^3/p^2. None means unknown.
    """
    if mu_tilde.kind == "gaussian-mixture":
        parts = [_ratio_status(c, mu) for c in mu_tilde.components]
        support = all(p[0] for p in parts)
        integrable = None if any(p[1] is None for p in parts) else all(p[1] for p in parts)
        variance = None if any(p[2] is None for p in parts) else all(p[2] for p in parts)
        return support, integrable, variance
    if mu.kind == "uniform-box":
        if mu_tilde.kind != "uniform-box":
            return False, False, False
        inside = bool(np.all(mu_tilde.low >= mu.low) and np.all(mu_tilde.high <= mu.high))
        return inside, inside, inside
    if mu_tilde.kind == "uniform-box":
        return True, True, True
    if mu.kind == "gaussian":
        integrable, variance = _gaussian_pair_status(mu_tilde, mu)
        return True, integrable, variance
    # mixture target: p >= w_j q_j, so one dominating component is enough
    statuses = [_gaussian_pair_status(mu_tilde, c) for c in mu.components]
    integrable = True if any(s[0] for s in statuses) else None
    variance = True if any(s[1] for s in statuses) else None
    return True, integrable, variance


def kappa(mu_tilde, mu, n_mc=DEFAULT_N_MC, seed=0):
    """
    Estimate kappa = ||d mu~ / d mu||_{L2(mu)}.

    Uses the identity int (dmu~/dmu)^2 dmu = E_{X ~ mu~}[p~(X)/p(X)], sampling
    from mu~ and evaluating the ratio in log space.

    Args:
        mu_tilde: Sampling distribution
        mu: Reference (data) distribution
        n_mc: Monte Carlo sample size
        seed: Sampling seed

    Returns:
        Estimate of kappa; `reliable=False` when the ratio is not square
        integrable or the estimator variance cannot be trusted
    """
    if mu_tilde.dim != mu.dim:
        raise InputError("kappa needs distributions of the same dimension")
    support_ok, integrable, finite_variance = _ratio_status(mu_tilde, mu)
    if not support_ok:
        raise AbsoluteContinuityError(f"support of {mu_tilde.kind} is not contained in support of {mu.kind}")

    X = sample(mu_tilde, n_mc, seed)
    log_ratio = _log_density_points(mu_tilde, X) - _log_density_points(mu, X)
    if np.any(np.isposinf(log_ratio)):
        raise AbsoluteContinuityError("sampled a point where the reference density vanishes")
    ratio = np.exp(log_ratio)
    mean = float(np.mean(ratio))
    se_mean = float(np.std(ratio, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("inf")
    value = float(np.sqrt(mean))
    stderr = se_mean / (2.0 * value) if value > 0.0 else 0.0

    reliable = True
    if integrable is False:
        reliable = False
        msg = "density ratio is not square-integrable; kappa is infinite and the estimate is unreliable"
        warnings.warn(msg, NonIntegrableWarning, stacklevel=2)
        logger.warning(msg)
    elif finite_variance is False or (finite_variance is None and stderr > 0.25 * value):
        reliable = False
        msg = "kappa estimator variance is infinite or exploding; estimate flagged unreliable"
        warnings.warn(msg, NonIntegrableWarning, stacklevel=2)
        logger.warning(msg)
    return Estimate(value=value, stderr=stderr, n=int(n_mc), reliable=reliable)


def kappa_gaussian_closed_form(mu_tilde, mu):
    """
    Exact kappa for two diagonal Gaussians.

    Per coordinate, int p~^2/p = t^2 / (s sqrt(2t^2 - s^2)) exp((a-b)^2 / (2t^2 - s^2))
    with p~ = N(a, s^2), p = N(b, t^2); infinite once s^2 >= 2 t^2.
    """
    if mu_tilde.kind != "gaussian" or mu.kind != "gaussian" or mu_tilde.dim != mu.dim:
        raise InputError("closed-form kappa needs two gaussians of equal dimension")
    s2, t2 = mu_tilde.sigma2, mu.sigma2
    if np.any(s2 >= 2.0 * t2):
        return float("inf")
    gap = 2.0 * t2 - s2
    log_terms = np.log(t2) - 0.5 * np.log(s2) - 0.5 * np.log(gap) + (mu_tilde.mean - mu.mean) ** 2 / gap
    return float(np.exp(0.5 * np.sum(log_terms)))


def l2_model_distance(m, M, mu, n_mc=DEFAULT_N_MC, seed=0):
    """
    ||m - M||_{L2(mu)} by Monte Carlo.

    Returns:
        Estimate in [0,1]; the standard error is propagated through the sqrt
    """
    if m.dim != M.dim or m.dim != mu.dim:
        raise InputError("models and distribution must share one dimension")
    X = sample(mu, n_mc, seed)
    sq = (predict(m, X) - predict(M, X)) ** 2
    mean = float(np.mean(sq))
    se_mean = float(np.std(sq, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    value = float(np.sqrt(mean))
    stderr = se_mean / (2.0 * value) if value > 0.0 else 0.0
    return Estimate(value=value, stderr=stderr, n=int(n_mc))


def _integration_box(dist, width=12.0):
    if dist.kind == "uniform-box":
        return dist.low, dist.high
    if dist.kind == "gaussian":
        half = width * np.sqrt(dist.sigma2)
        return dist.mean - half, dist.mean + half
    boxes = [_integration_box(c, width) for c in dist.components]
    return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


def check_normalization(dist):
    """Integrate the density by quadrature (d <= 2); the result should be 1."""
    lo, hi = _integration_box(dist)
    if dist.dim == 1:
        value, _ = integrate.quad(lambda t: density(dist, np.array([t])), lo[0], hi[0], limit=200)
        return float(value)
    if dist.dim == 2:
        value, _ = integrate.dblquad(lambda b, a: density(dist, np.array([a, b])),
                                     lo[0], hi[0], lo[1], hi[1])
        return float(value)
    raise InputError("quadrature normalization check is limited to d <= 2")


def sample_labeled(labeled, n, seed, B=None):
    """
    Draw (X, y) with y in {-1, +1} and P(y = +1 | x) = labeler(x).

    Points are pulled radially onto the ball ||x||_2 <= B when B is given.
    """
    rng = make_rng(seed)
    X = sample(labeled.marginal, n, rng)
    if B is not None:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X * np.minimum(1.0, B / np.maximum(norms, 1e-300))
    p = np.atleast_1d(predict(labeled.labeler, X))
    y = np.where(rng.random(X.shape[0]) < p, 1.0, -1.0)
    return X, y


def distribution_to_dict(dist):
    """{kind, dim, mean, sigma2 | components | bounds}"""
    out = {"kind": dist.kind, "dim": int(dist.dim)}
    if dist.kind == "gaussian":
        out["mean"] = dist.mean.tolist()
        out["sigma2"] = dist.sigma2.tolist()
    elif dist.kind == "uniform-box":
        out["bounds"] = [[float(a), float(b)] for a, b in zip(dist.low, dist.high)]
    else:
        out["components"] = [
            {"weight": float(w), "mean": c.mean.tolist(), "sigma2": c.sigma2.tolist()}
            for w, c in zip(dist.weights, dist.components)
        ]
    return out


def distribution_from_dict(data):
    kind = data.get("kind")
    dim = data.get("dim")
    if kind == "gaussian":
        mean = data.get("mean", [0.0] * int(dim or 1))
        dist = gaussian(mean, data.get("sigma2", 1.0))
    elif kind == "uniform-box":
        bounds = np.asarray(data["bounds"], dtype=float)
        dist = uniform_box(bounds[:, 0], bounds[:, 1])
    elif kind == "gaussian-mixture":
        comps = data["components"]
        dist = gaussian_mixture([c["weight"] for c in comps],
                                [gaussian(c["mean"], c["sigma2"]) for c in comps])
    else:
        raise InputError(f"unknown distribution kind '{kind}'")
    if dim is not None and int(dim) != dist.dim:
        raise InputError(f"declared dim {dim} does not match parameters of dimension {dist.dim}")
    return dist
