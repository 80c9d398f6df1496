"""
Ensembles of changed models M and the checks of naturally- and generally-occurring model change.
"""
import logging
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from robustness.distributions import Estimate, l2_model_distance, sample, sample_labeled
from robustness.models import ensemble_lipschitz, linear_sigmoid, predict, wrapped_model
from robustness.training import Dataset, gd_train, joint_divergence_trace
from utils.errors import ConfigError, InputError, LowPowerWarning, PerturbationSpecError
from utils.parallel import parallel_map
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

GENERATORS = ("retrain-perturbed", "retrain-bootstrap", "parameter-ball", "output-noise")
NU_FALLBACK = 0.5
LAMBDA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0)
MIN_MEMBERS = 10

NOMC_CONSISTENT = "NOMC-consistent"
GOMC_ONLY = "GOMC-only"
NEITHER = "neither"


@dataclass(frozen=True)
class GeneratorSpec:
    """
    How members are produced.

    retrain-perturbed: replace r examples (tail by default) and retrain
    retrain-bootstrap: resample the dataset with replacement and retrain
    parameter-ball: theta + shift + u with u uniform in the open ball of radius delta
    output-noise: clamp(m + u) with one offset u ~ U(-noise, noise) per member
    """
    kind: str
    r: int = 0
    positions: tuple = None
    delta: float = 0.0
    shift: tuple = None
    noise: float = 0.0
    antithetic: bool = True

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown generator '{self.kind}'")
        if self.r < 0 or self.delta < 0.0 or self.noise < 0.0:
            raise ConfigError("r, delta and noise must be non-negative")


@dataclass(frozen=True, eq=False)
class TrainingSetup:
    """Everything a retraining generator needs: problem, data, steps and where replacements come from."""
    problem: object
    data: Dataset
    step_sizes: np.ndarray
    theta0: np.ndarray = None
    source: object = None
    replacements: Dataset = None
    epochs: int = 1


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    r: int
    positions: tuple = None
    source: object = None
    replacements: Dataset = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ModelChangeEnsemble:
    original: object
    members: list
    generator: GeneratorSpec
    seed: int
    member_seeds: list = field(default_factory=list)
    divergences: list = None

    @property
    def size(self):
        return len(self.members)


@dataclass(frozen=True, eq=False)
class ModelChangeProfile:
    delta: Estimate
    nu: float
    gamma: float
    regime: str
    distances: np.ndarray
    distance_stderrs: np.ndarray
    nomc: dict
    nu_fallback: float = NU_FALLBACK


def perturbation_positions(n, r, positions=None):
    """Tail positions n-r .. n-1 (0-based) unless explicit positions are given."""
    if not 0 <= r <= n:
        raise PerturbationSpecError(f"cannot replace r={r} of n={n} examples")
    if positions is None:
        return tuple(range(n - r, n))
    positions = tuple(int(p) for p in positions)
    if len(positions) != r or len(set(positions)) != r or any(p < 0 or p >= n for p in positions):
        raise PerturbationSpecError("positions must be r distinct indices in [0, n)")
    return tuple(sorted(positions))


def perturb_dataset(data, spec, B=None):
    """
    Replace the examples at the perturbation positions.

    Replacements are drawn from spec.source (a LabeledDistribution) or taken in
    order from spec.replacements.

    Returns:
        (perturbed Dataset, positions)
    """
    positions = perturbation_positions(len(data), spec.r, spec.positions)
    if not positions:
        return data, positions
    if spec.replacements is not None:
        if len(spec.replacements) < len(positions):
            raise PerturbationSpecError("not enough explicit replacement examples")
        newX, newy = spec.replacements.X[:len(positions)], spec.replacements.y[:len(positions)]
    elif spec.source is not None:
        newX, newy = sample_labeled(spec.source, len(positions), spec.seed, B=B)
    else:
        raise PerturbationSpecError("perturbation needs a replacement source or explicit examples")
    X = data.X.copy()
    y = data.y.copy()
    X[list(positions)] = newX
    y[list(positions)] = newy
    return Dataset(X, y), positions


def _train_model(setup, data):
    trace = gd_train(setup.problem, data, setup.step_sizes, setup.theta0, epochs=setup.epochs)
    return linear_sigmoid(trace.final)


def _uniform_ball_offset(rng, d, radius):
    if radius == 0.0:
        return np.zeros(d)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.random() ** (1.0 / d)


def generate_ensemble(spec, count, seed, base=None, setup=None, jobs=1):
    """
    Build `count` changed models under one of the model-change regimes.

    Args:
        spec: GeneratorSpec
        count: Number of members
        seed: Root seed; member i draws from derive_seed(seed, "member", i)
        base: Original model (parameter-ball and output-noise generators)
        setup: TrainingSetup (retraining generators); the original is retrained from it
        jobs: Worker count

    Returns:
        ModelChangeEnsemble
    """
    if count < 1:
        raise ConfigError("an ensemble needs at least one member")
    member_seeds = [derive_seed(seed, "member", i) for i in range(count)]

    if spec.kind.startswith("retrain"):
        if setup is None:
            raise ConfigError(f"generator '{spec.kind}' needs a training setup")
        original = _train_model(setup, setup.data)
    else:
        if base is None:
            raise ConfigError(f"generator '{spec.kind}' needs a base model")
        original = base

    divergences = None
    if spec.kind == "retrain-perturbed":
        if setup.epochs != 1:
            raise ConfigError("retrain-perturbed divergence tracking needs single-pass training")

        def build(member_seed):
            pspec = PerturbationSpec(r=spec.r, positions=spec.positions, source=setup.source,
                                     replacements=setup.replacements, seed=member_seed)
            perturbed, positions = perturb_dataset(setup.data, pspec, B=setup.problem.B)
            joint = joint_divergence_trace(setup.problem, setup.data, perturbed, setup.step_sizes,
                                           setup.theta0, positions=positions)
            return linear_sigmoid(joint.trace2.final), joint

        built = parallel_map(build, member_seeds, jobs)
        members = [b[0] for b in built]
        divergences = [b[1] for b in built]
    elif spec.kind == "retrain-bootstrap":
        n = len(setup.data)

        def build(member_seed):
            idx = make_rng(member_seed).integers(0, n, size=n)
            return _train_model(setup, Dataset(setup.data.X[idx], setup.data.y[idx]))

        members = parallel_map(build, member_seeds, jobs)
    elif spec.kind == "parameter-ball":
        if original.kind != "linear-sigmoid":
            raise ConfigError("parameter-ball perturbs linear-sigmoid parameters")
        shift = np.zeros(original.dim) if spec.shift is None else np.asarray(spec.shift, dtype=float)
        if shift.shape != (original.dim,):
            raise ConfigError("shift must match the model dimension")
        members = [linear_sigmoid(original.theta + shift
                                  + _uniform_ball_offset(make_rng(s), original.dim, spec.delta),
                                  original.bias)
                   for s in member_seeds]
    else:
        offsets = []
        for i, s in enumerate(member_seeds):
            if spec.antithetic and i % 2 == 1:
                offsets.append(-offsets[-1])
            else:
                offsets.append(float(make_rng(s).uniform(-spec.noise, spec.noise)))
        members = [wrapped_model(original, u) for u in offsets]

    logger.info("generated %d members with %s", len(members), spec.kind)
    return ModelChangeEnsemble(original=original, members=members, generator=spec, seed=int(seed),
                               member_seeds=member_seeds, divergences=divergences)


def estimate_nu(distances, grid=LAMBDA_GRID):
    """
    Subgaussian parameter of the centered distances from the empirical log-MGF.

    nu = max over lambda of sqrt(2 phi(lambda) / lambda^2), clamped to the
    bounded-range value 1/2; fewer than two samples give the fallback.
    """
    d = np.asarray(distances, dtype=float)
    if d.size < 2:
        return NU_FALLBACK
    centered = d - d.mean()
    best = 0.0
    for lam in grid:
        phi = float(np.log(np.mean(np.exp(lam * centered))))
        best = max(best, float(np.sqrt(max(0.0, 2.0 * phi / lam ** 2))))
    return min(best, NU_FALLBACK)


def check_nomc(ens, mu, test_points, n_boot=1_000, seed=0, confidence=0.99):
    """
    Pointwise checks of naturally-occurring model change at on-manifold test points.

    Condition 1 is a bootstrap test of E[M(x)] = m(x); condition 2 reports the
    worst Var[M(x)]; condition 3 is whether the ensemble Lipschitz bound is finite.
    Points where any member output is clamped to 0 or 1 are left out.

    Returns:
        Dict with max_mean_deviation, max_variance, lipschitz_ok, gamma, rejected,
        low_power, n_tested, n_excluded
    """
    points = np.atleast_2d(np.asarray(test_points, dtype=float))
    low_power = ens.size < MIN_MEMBERS
    if low_power:
        msg = f"only {ens.size} members; NOMC statistics are low-power"
        warnings.warn(msg, LowPowerWarning, stacklevel=2)
        logger.warning(msg)

    base = np.atleast_1d(predict(ens.original, points))
    outputs = np.stack([np.atleast_1d(predict(M, points)) for M in ens.members], axis=1)
    clamped = np.any((outputs == 0.0) | (outputs == 1.0), axis=1)
    dev = outputs[~clamped] - base[~clamped, None]

    gamma = ensemble_lipschitz([ens.original] + list(ens.members), domain=mu, seed=seed)
    report = {
        "max_mean_deviation": 0.0,
        "max_variance": 0.0,
        "lipschitz_ok": bool(np.isfinite(gamma)),
        "gamma": float(gamma),
        "rejected": False,
        "low_power": bool(low_power),
        "n_tested": int(dev.shape[0]),
        "n_excluded": int(clamped.sum()),
    }
    if dev.shape[0] == 0:
        return report

    means = dev.mean(axis=1)
    report["max_mean_deviation"] = float(np.max(np.abs(means)))
    if ens.size > 1:
        report["max_variance"] = float(np.max(np.var(outputs[~clamped], axis=1, ddof=1)))
        idx = make_rng(seed).integers(0, ens.size, size=(n_boot, ens.size))
        boot = dev[:, idx].mean(axis=2)
        tail = (1.0 - confidence) / 2.0
        lo, hi = np.quantile(boot, [tail, 1.0 - tail], axis=1)
        report["rejected"] = bool(np.any((lo > 0.0) | (hi < 0.0)))
    return report


def estimate_profile(ens, mu, n_mc=100_000, seed=0, n_test=50, n_boot=1_000, jobs=1):
    """
    Estimate the generally-occurring model change parameters of an ensemble.

    delta is the mean L2(mu) distance to the original (common random numbers
    across members); nu comes from estimate_nu; gamma from the Lipschitz
    constants of the original and all members; the regime from check_nomc.

    Returns:
        ModelChangeProfile
    """
    if ens.size < 1:
        raise InputError("cannot profile an empty ensemble")
    l2_seed = derive_seed(seed, "l2")
    estimates = parallel_map(lambda M: l2_model_distance(ens.original, M, mu, n_mc, l2_seed),
                             ens.members, jobs)
    values = np.array([e.value for e in estimates])
    stderrs = np.array([e.stderr for e in estimates])
    n = values.size
    between = float(np.var(values, ddof=1)) if n > 1 else 0.0
    delta = Estimate(value=float(values.mean()),
                     stderr=float(np.sqrt(between / n + np.mean(stderrs ** 2) / n)), n=int(n_mc))

    test_points = sample(mu, n_test, derive_seed(seed, "nomc-points"))
    nomc = check_nomc(ens, mu, test_points, n_boot, derive_seed(seed, "bootstrap"))
    if not nomc["lipschitz_ok"]:
        regime = NEITHER
    elif not nomc["rejected"]:
        regime = NOMC_CONSISTENT
    else:
        regime = GOMC_ONLY
    nu = estimate_nu(values)
    logger.info("profile: delta=%.4g (se %.2g) nu=%.4g gamma=%.4g regime=%s",
                delta.value, delta.stderr, nu, nomc["gamma"], regime)
    return ModelChangeProfile(delta=delta, nu=nu, gamma=nomc["gamma"], regime=regime,
                              distances=values, distance_stderrs=stderrs, nomc=nomc)


def validity_under_change(ens, xbar):
    """Fraction of members that still give M(xbar) >= 0.5."""
    outputs = np.array([predict(M, xbar) for M in ens.members])
    return float(np.mean(outputs >= 0.5))


def generator_to_dict(spec):
    out = asdict(spec)
    if spec.positions is not None:
        out["positions"] = list(spec.positions)
    if spec.shift is not None:
        out["shift"] = [float(v) for v in spec.shift]
    return out


def profile_to_dict(profile):
    return {
        "delta": profile.delta.value,
        "delta_stderr": profile.delta.stderr,
        "nu": profile.nu,
        "nu_fallback": profile.nu_fallback,
        "gamma": profile.gamma,
        "regime": profile.regime,
        "distances": profile.distances.tolist(),
        "distance_stderrs": profile.distance_stderrs.tolist(),
        "nomc": dict(profile.nomc),
    }


def profile_from_dict(data):
    return ModelChangeProfile(
        delta=Estimate(value=data["delta"], stderr=data["delta_stderr"], n=0),
        nu=data["nu"], gamma=data["gamma"], regime=data["regime"],
        distances=np.asarray(data["distances"], dtype=float),
        distance_stderrs=np.asarray(data["distance_stderrs"], dtype=float),
        nomc=dict(data["nomc"]), nu_fallback=data.get("nu_fallback", NU_FALLBACK))
