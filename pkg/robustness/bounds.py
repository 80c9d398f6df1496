"""
Analytic right-hand sides of the three robustness guarantees and their Monte Carlo verification
over model-change ensembles.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm

from robustness.distributions import Estimate, sample
from robustness.models import predict
from robustness.stability import sampling_distribution
from utils.errors import QueryError
from utils.parallel import parallel_map
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

THEOREMS = ("T1", "T2", "T3")
CONFIDENCE = 0.99
STATUS_OK = "ok"
STATUS_SKIPPED = "skipped"
REPORT_COLUMNS = ["theorem", "k", "epsilon", "ell", "rhs", "freq", "ci_lo", "ci_hi",
                  "violated", "trials", "seed"]


@dataclass(frozen=True, eq=False)
class BoundQuery:
    """
    Parameters of one bound evaluation.

    T1 needs gamma, gamma_m, sigma2; T2 needs ell, delta, nu, kappa;
    T3 needs loss, step_sizes, differing_steps and kappa. gamma enters every event.
    """
    theorem: str
    epsilon: float
    k: int
    gamma: float = None
    gamma_m: float = None
    sigma2: float = None
    ell: float = None
    delta: float = None
    nu: float = None
    kappa: object = None
    loss: object = None
    step_sizes: np.ndarray = None
    differing_steps: tuple = None

    def __post_init__(self):
        if self.theorem not in THEOREMS:
            raise QueryError(f"unknown theorem '{self.theorem}'")
        if not self.epsilon > 0.0:
            raise QueryError("epsilon must be positive")
        if int(self.k) < 1:
            raise QueryError("k must be >= 1")
        required = {
            "T1": ("gamma", "gamma_m", "sigma2"),
            "T2": ("ell", "delta", "nu", "kappa"),
            "T3": ("loss", "step_sizes", "differing_steps", "kappa"),
        }[self.theorem]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise QueryError(f"{self.theorem} query is missing {', '.join(missing)}")
        for name in ("gamma", "gamma_m", "delta", "nu"):
            value = getattr(self, name)
            if value is not None and not value >= 0.0:
                raise QueryError(f"{name} must be non-negative")
        if self.sigma2 is not None and not self.sigma2 > 0.0:
            raise QueryError("sigma2 must be positive")
        if self.ell is not None and not self.ell > 0.0:
            raise QueryError("ell must be positive")


@dataclass(frozen=True)
class VerificationReport:
    theorem: str
    k: int
    epsilon: float
    ell: float
    frequency: float
    ci_lo: float
    ci_hi: float
    rhs: float
    violated: bool
    vacuous: bool
    trials: int
    seed: int
    status: str = STATUS_OK


def rhs_theorem1(q):
    """exp(-k eps^2 / (8 (gamma + gamma_m)^2 sigma2))"""
    if q.theorem != "T1":
        raise QueryError("rhs_theorem1 needs a T1 query")
    scale = 8.0 * (q.gamma + q.gamma_m) ** 2 * q.sigma2
    if scale == 0.0:
        return 0.0
    return math.exp(-q.k * q.epsilon ** 2 / scale)


def rhs_theorem2(q):
    """2 exp(-eps^2 k / 2) + exp(-ell^2 / 2); may exceed 1."""
    if q.theorem != "T2":
        raise QueryError("rhs_theorem2 needs a T2 query")
    return 2.0 * math.exp(-q.epsilon ** 2 * q.k / 2.0) + math.exp(-q.ell ** 2 / 2.0)


def rhs_theorem3(q):
    """2 exp(-eps^2 k / 2): the T2 form with nu = 0 and ell -> infinity."""
    if q.theorem != "T3":
        raise QueryError("rhs_theorem3 needs a T3 query")
    return 2.0 * math.exp(-q.epsilon ** 2 * q.k / 2.0)


def rhs(q):
    return {"T1": rhs_theorem1, "T2": rhs_theorem2, "T3": rhs_theorem3}[q.theorem](q)


def theorem3_bound_delta(loss, step_sizes, differing_steps):
    """
    Bound on ||m - M||_{L2(mu)} after retraining on r replaced examples.

    Args:
        loss: LossFunction providing L and xi
        step_sizes: eta_1 .. eta_n
        differing_steps: 0-based steps at which the two training sequences differ

    Returns:
        (2 L^2 / xi) * sum of eta_t over the differing steps
    """
    steps = np.asarray(step_sizes, dtype=float)
    picked = [steps[int(t)] for t in differing_steps]
    if not picked or loss.L == 0.0:
        return 0.0
    return float(2.0 * loss.L ** 2 / loss.xi * math.fsum(picked))


def theorem3_consistency(distances, stderrs, bound):
    """Members whose measured L2 distance exceeds bound + 3 stderr."""
    distances = np.asarray(distances, dtype=float)
    stderrs = np.asarray(stderrs, dtype=float)
    excess = distances - (bound + 3.0 * stderrs)
    return {
        "bound": float(bound),
        "max_distance": float(distances.max()) if distances.size else 0.0,
        "violations": int(np.sum(excess > 0.0)),
        "members": int(distances.size),
    }


def wilson_interval(successes, trials, confidence=CONFIDENCE):
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    z = float(norm.ppf(0.5 + confidence / 2.0))
    p = successes / trials
    denom = 1.0 + z ** 2 / trials
    center = (p + z ** 2 / (2.0 * trials)) / denom
    half = z / denom * math.sqrt(p * (1.0 - p) / trials + z ** 2 / (4.0 * trials ** 2))
    return max(0.0, center - half), min(1.0, center + half)


def _kappa_value(q):
    """kappa as a float, or None when it is infinite or flagged unreliable."""
    kap = q.kappa
    if isinstance(kap, Estimate):
        if not kap.reliable:
            return None
        kap = kap.value
    kap = float(kap)
    return kap if math.isfinite(kap) else None


def event_offset(q):
    """
    Right-hand threshold of the event beyond the Lipschitz term.

    T1: eps (the rewritten form without eps')
    T2: eps + (delta + ell * nu) * kappa
    T3: eps + theorem3_bound_delta * kappa
    None when kappa is unavailable.
    """
    if q.theorem == "T1":
        return q.epsilon
    kap = _kappa_value(q)
    if kap is None:
        return None
    if q.theorem == "T2":
        return q.epsilon + (q.delta + q.ell * q.nu) * kap
    return q.epsilon + theorem3_bound_delta(q.loss, q.step_sizes, q.differing_steps) * kap


def event_gaps(ensemble, x, cfg, k, gamma, trials, seed, jobs=1):
    """
    Per-trial value of (1/k) sum m(X_i) - M(x) - (gamma/k) sum ||x - X_i||_2.

    Trial t draws from make_rng((seed, t)): first the member index, then the k
    samples, so results do not depend on the worker count.
    """
    x = np.asarray(x, dtype=float)
    mu_tilde = sampling_distribution(cfg, x)
    changed_at_x = np.array([predict(M, x) for M in ensemble.members])

    def draw(t):
        rng = make_rng((int(seed), int(t)))
        member = int(rng.integers(0, ensemble.size))
        return member, sample(mu_tilde, k, rng)

    draws = parallel_map(draw, range(int(trials)), jobs)
    members = np.array([d[0] for d in draws])
    X = np.stack([d[1] for d in draws])
    local = np.asarray(predict(ensemble.original, X.reshape(-1, x.shape[0]))).reshape(trials, k)
    dist = np.linalg.norm(X - x, axis=2)
    return local.mean(axis=1) - changed_at_x[members] - gamma * dist.mean(axis=1)


def skipped_report(q, seed, reason):
    """Report for a grid point that could not be verified; never counts as a violation."""
    logger.warning("%s at k=%d eps=%g skipped: %s", q.theorem, q.k, q.epsilon, reason)
    bound = rhs(q)
    return VerificationReport(theorem=q.theorem, k=int(q.k), epsilon=float(q.epsilon), ell=q.ell,
                              frequency=float("nan"), ci_lo=float("nan"), ci_hi=float("nan"),
                              rhs=bound, violated=False, vacuous=bound >= 1.0, trials=0,
                              seed=int(seed), status=STATUS_SKIPPED)


def _report(q, gaps, offset, trials, seed):
    if offset is None:
        return skipped_report(q, seed, "kappa unavailable")
    bound = rhs(q)
    vacuous = bound >= 1.0
    hits = int(np.sum(gaps >= offset))
    lo, hi = wilson_interval(hits, trials)
    violated = (not vacuous) and lo > bound
    if violated:
        logger.warning("%s violated at k=%d eps=%g ell=%s: ci_lo %.4g > rhs %.4g",
                       q.theorem, q.k, q.epsilon, q.ell, lo, bound)
    return VerificationReport(theorem=q.theorem, k=int(q.k), epsilon=float(q.epsilon), ell=q.ell,
                              frequency=hits / trials, ci_lo=lo, ci_hi=hi, rhs=bound,
                              violated=violated, vacuous=vacuous, trials=int(trials), seed=int(seed))


def lhs_event_frequency(ensemble, x, cfg, q, trials, seed, jobs=1):
    """
    Monte Carlo frequency of the left-hand-side event of q's theorem.

    Each trial draws one M from the ensemble and k fresh points from the sampling
    distribution of cfg around x, then checks
    (1/k) sum m(X_i) - M(x) >= (gamma/k) sum ||x - X_i||_2 + offset.

    Returns:
        VerificationReport; status "skipped" when kappa is unavailable
    """
    if q.gamma is None:
        raise QueryError("event evaluation needs gamma")
    offset = event_offset(q)
    gaps = None if offset is None else event_gaps(ensemble, x, cfg, q.k, q.gamma, trials, seed, jobs)
    return _report(q, gaps, offset, trials, seed)


def verify_grid(ensemble, x, cfg, template, ks, epsilons, ells=(None,), trials=10_000, seed=0, jobs=1):
    """
    Evaluate a (k, eps, ell) grid sharing one set of per-trial gaps per k.

    Args:
        template: BoundQuery carrying the theorem and its fixed parameters
        ells: ignored (use (None,)) for T1 and T3

    Returns:
        List of VerificationReport in grid order k, epsilon, ell
    """
    if template.gamma is None:
        raise QueryError("event evaluation needs gamma")
    ells = tuple(ells) if template.theorem == "T2" else (None,)
    reports = []
    for k in ks:
        gaps = None
        for eps in epsilons:
            for ell in ells:
                q = replace(template, k=int(k), epsilon=float(eps), ell=template.ell if ell is None else float(ell))
                offset = event_offset(q)
                if offset is not None and gaps is None:
                    gaps = event_gaps(ensemble, x, cfg, int(k), q.gamma, trials, seed, jobs)
                reports.append(_report(q, gaps, offset, trials, seed))
    n_bad = sum(r.violated for r in reports)
    logger.info("%s grid: %d points, %d violated, %d vacuous, %d skipped", template.theorem, len(reports),
                n_bad, sum(r.vacuous for r in reports), sum(r.status == STATUS_SKIPPED for r in reports))
    return reports


def deviation_frequency(m, M, mu_tilde, distance, kap, k, epsilon, trials, seed):
    """
    Frequency of psi >= ||m - M||_{L2(mu)} * kappa + eps for a fixed M, against 2 exp(-eps^2 k / 2).

    Args:
        m, M: Original and changed model
        mu_tilde: Sampling distribution of the k points
        distance: ||m - M||_{L2(mu)} (float or Estimate)
        kap: kappa(mu_tilde, mu) (float or Estimate)

    Returns:
        VerificationReport with theorem "deviation"
    """
    threshold = float(distance) * float(kap) + epsilon
    psis = np.empty(int(trials))
    for t in range(int(trials)):
        X = sample(mu_tilde, k, (int(seed), t))
        psis[t] = np.mean(np.atleast_1d(predict(m, X)) - np.atleast_1d(predict(M, X)))
    hits = int(np.sum(psis >= threshold))
    lo, hi = wilson_interval(hits, trials)
    bound = 2.0 * math.exp(-epsilon ** 2 * k / 2.0)
    vacuous = bound >= 1.0
    return VerificationReport(theorem="deviation", k=int(k), epsilon=float(epsilon), ell=None,
                              frequency=hits / trials, ci_lo=lo, ci_hi=hi, rhs=bound,
                              violated=(not vacuous) and lo > bound, vacuous=vacuous,
                              trials=int(trials), seed=int(seed))


def reports_to_frame(reports):
    """Bound grid table with the columns of bounds.csv."""
    rows = [{
        "theorem": r.theorem, "k": r.k, "epsilon": r.epsilon,
        "ell": np.nan if r.ell is None else r.ell, "rhs": r.rhs, "freq": r.frequency,
        "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "violated": r.violated, "trials": r.trials, "seed": r.seed,
    } for r in reports]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def reports_from_frame(frame):
    reports = []
    for row in frame.itertuples(index=False):
        bound = float(row.rhs)
        reports.append(VerificationReport(
            theorem=row.theorem, k=int(row.k), epsilon=float(row.epsilon),
            ell=None if pd.isna(row.ell) else float(row.ell), frequency=float(row.freq),
            ci_lo=float(row.ci_lo), ci_hi=float(row.ci_hi), rhs=bound, violated=bool(row.violated),
            vacuous=bound >= 1.0, trials=int(row.trials), seed=int(row.seed),
            status=STATUS_OK if int(row.trials) > 0 else STATUS_SKIPPED))
    return reports
