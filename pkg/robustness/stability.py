"""
Stability measure R, its computable relaxation R-hat, the Counterfactual Robustness Test
and the deviation statistic psi.
"""
import logging
from dataclasses import dataclass

import numpy as np

from robustness.distributions import Distribution, distribution_to_dict, gaussian, sample
from robustness.models import predict
from utils.errors import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StabilityConfig:
    """
    k local samples around x, drawn from N(x, sigma2 I) unless `sampling` gives
    another analytic distribution; tau is the robustness-test threshold.
    """
    k: int
    sigma2: float = None
    sampling: Distribution = None
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if int(self.k) < 1:
            raise InputError("k must be >= 1")
        if self.sampling is None and not (self.sigma2 is not None and self.sigma2 > 0.0):
            raise InputError("gaussian sampling needs sigma2 > 0")
        if not 0.0 <= self.tau <= 1.0:
            raise InputError("tau must lie in [0,1]")


@dataclass(frozen=True, eq=False)
class StabilityReport:
    x: np.ndarray
    samples: np.ndarray
    R: float
    Rhat: float
    passed: bool
    psi: float = None


def sampling_distribution(cfg, x):
    if cfg.sampling is not None:
        return cfg.sampling
    return gaussian(np.asarray(x, dtype=float), cfg.sigma2)


def draw_neighborhood(x, cfg):
    """N_{x,k}: the k samples shared by R, R-hat and psi under one seed."""
    return sample(sampling_distribution(cfg, x), cfg.k, cfg.seed)


def stability_R(model, gamma, x, cfg, samples=None):
    """R = (1/k) sum (m(x_i) - gamma * ||x - x_i||_2)."""
    if not gamma >= 0.0:
        raise InputError("gamma must be non-negative")
    x = np.asarray(x, dtype=float)
    samples = draw_neighborhood(x, cfg) if samples is None else samples
    dist = np.linalg.norm(samples - x, axis=1)
    return float(np.mean(np.atleast_1d(predict(model, samples)) - gamma * dist))


def stability_Rhat(model, x, cfg, samples=None):
    """R-hat = (1/k) sum (m(x_i) - |m(x) - m(x_i)|); no Lipschitz constant needed."""
    x = np.asarray(x, dtype=float)
    samples = draw_neighborhood(x, cfg) if samples is None else samples
    local = np.atleast_1d(predict(model, samples))
    return float(np.mean(local - np.abs(predict(model, x) - local)))


def robustness_test(model, x, cfg, samples=None):
    """Accept the counterfactual iff R-hat >= tau."""
    rhat = stability_Rhat(model, x, cfg, samples)
    return {"pass": bool(rhat >= cfg.tau), "Rhat": rhat}


def psi_statistic(m, M, samples):
    """psi = (1/k) sum (m(X_i) - M(X_i)), in [-1, 1]."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise InputError("psi needs at least one sample")
    return float(np.mean(np.atleast_1d(predict(m, samples)) - np.atleast_1d(predict(M, samples))))


def stability_report(model, x, cfg, gamma=None, changed=None):
    """
    R-hat, the test verdict and, when available, R (needs gamma) and psi (needs M).

    R stays None without gamma rather than being approximated.
    """
    x = np.asarray(x, dtype=float)
    samples = draw_neighborhood(x, cfg)
    rhat = stability_Rhat(model, x, cfg, samples)
    R = None if gamma is None else stability_R(model, gamma, x, cfg, samples)
    psi = None if changed is None else psi_statistic(model, changed, samples)
    return StabilityReport(x=x, samples=samples, R=R, Rhat=rhat, passed=bool(rhat >= cfg.tau), psi=psi)


def report_to_dict(report, cfg):
    """{x, k, sigma2, R, Rhat, tau, pass, seed} for JSON export."""
    out = {
        "x": [float(v) for v in report.x],
        "k": int(cfg.k),
        "sigma2": None if cfg.sigma2 is None else float(cfg.sigma2),
        "R": report.R,
        "Rhat": report.Rhat,
        "tau": float(cfg.tau),
        "pass": report.passed,
        "seed": int(cfg.seed),
    }
    if cfg.sampling is not None:
        out["sampling"] = distribution_to_dict(cfg.sampling)
    if report.psi is not None:
        out["psi"] = report.psi
    return out


def validity_by_tau(rhats, validity, taus):
    """
    For each tau, the cohort of counterfactuals passing the test and its mean validity.

    Args:
        rhats: R-hat per counterfactual
        validity: Validity rate under model change per counterfactual
        taus: Thresholds

    Returns:
        List of dicts {tau, cohort_size, validity_rate}; the rate is NaN for empty cohorts
    """
    rhats = np.asarray(rhats, dtype=float)
    validity = np.asarray(validity, dtype=float)
    rows = []
    for tau in taus:
        cohort = rhats >= tau
        size = int(cohort.sum())
        rate = float(validity[cohort].mean()) if size else float("nan")
        rows.append({"tau": float(tau), "cohort_size": size, "validity_rate": rate})
    return rows


def cohort_split(rhats, validity, tau):
    """Validity rates and sizes of the R-hat >= tau and R-hat < tau cohorts."""
    rhats = np.asarray(rhats, dtype=float)
    validity = np.asarray(validity, dtype=float)
    hi = rhats >= tau
    return {
        "tau": float(tau),
        "pass_size": int(hi.sum()),
        "pass_validity": float(validity[hi].mean()) if hi.any() else float("nan"),
        "fail_size": int((~hi).sum()),
        "fail_validity": float(validity[~hi].mean()) if (~hi).any() else float("nan"),
    }
