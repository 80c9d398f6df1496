"""
Config-driven experiment pipeline.
Stages run in order synthesize -> train -> ensemble -> profile -> counterfactuals ->
stability -> bounds; each writes flat CSV/JSON artifacts under one output directory.
"""
import contextlib
import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import logit

from robustness import __version__
from robustness.bounds import (BoundQuery, reports_from_frame, reports_to_frame, skipped_report,
                               theorem3_bound_delta, theorem3_consistency, verify_grid)
from robustness.counterfactual import MODES, NORMS, CounterfactualQuery, find_counterfactuals
from robustness.distributions import (LabeledDistribution, distribution_from_dict, gaussian, kappa,
                                      sample, sample_labeled)
from robustness.modelchange import (GENERATORS, GeneratorSpec, ModelChangeEnsemble, TrainingSetup,
                                    check_nomc, estimate_profile, generate_ensemble, generator_to_dict,
                                    perturbation_positions, profile_from_dict, profile_to_dict,
                                    validity_under_change)
from robustness.models import lipschitz_constant, linear_sigmoid, model_from_dict, model_to_dict, predict
from robustness.stability import (StabilityConfig, cohort_split, report_to_dict, sampling_distribution,
                                  stability_R, stability_Rhat, stability_report, validity_by_tau)
from robustness.training import (Dataset, LossFunction, average_loss, bounded_problem, check_bounded,
                                 check_expansive, check_loss_constants, default_step_sizes, gd_train,
                                 gradient_check, trace_to_frame)
from utils.data_loader import (dataset_frame, frame_points, load_dataset, load_json, load_model,
                               points_frame, read_csv, read_header, save_model, write_csv, write_json)
from utils.errors import (AbsoluteContinuityError, BoundViolationError, ConfigError, DependencyError,
                          InfeasibilityError, InputError, StageError)
from utils.parallel import parallel_map
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("synthesize", "train", "ensemble", "profile", "counterfactuals", "stability", "bounds")
STAGE_FILES = {
    "synthesize": ("dataset.csv",),
    "train": ("model.json", "trace.csv"),
    "ensemble": ("ensemble.json", "divergence.csv", "divergence_trace.csv"),
    "profile": ("profile.json",),
    "counterfactuals": ("counterfactuals.csv",),
    "stability": ("stability.json", "validity.csv"),
    "bounds": ("bounds.csv",),
}
FIGURES = {
    "bound-curves": ("bounds", "bounds.csv",
                     ["theorem", "k", "epsilon", "ell", "rhs", "freq", "ci_lo", "ci_hi"]),
    "validity-vs-tau": ("stability", "validity.csv", ["tau", "cohort_size", "validity_rate"]),
    "divergence-trace": ("ensemble", "divergence_trace.csv",
                         ["member", "t", "delta_t", "analytic_bound_prefix"]),
}

DEFAULTS = {
    "data": {
        "n": 200,
        "B": 1.0,
        "marginal": {"kind": "gaussian", "mean": [0.0, 0.0], "sigma2": 0.25},
        "labeler": {"theta": [4.0, -2.0], "bias": 0.0},
    },
    "train": {"loss": "logistic", "eta": None, "step_sizes": None, "theta0": None, "epochs": 1},
    "perturb": {"generator": "retrain-perturbed", "r": 2, "positions": None, "count": 50,
                "delta": 0.0, "shift": None, "noise": 0.0, "antithetic": True},
    "profile": {"n_mc": 20_000, "n_test": 50, "n_boot": 1_000},
    "counterfactual": {"norm": "l2", "mode": "free", "points": None, "sample_negatives": 60,
                       "margin_slacks": [0.0]},
    "stability": {"k": 200, "sigma2": 0.01, "sampling": None, "tau": 0.7,
                  "taus": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
    "bounds": {"theorems": ["T1", "T2", "T3"], "k": [50, 200], "epsilon": [0.1, 0.2, 0.3],
               "ell": [1.0, 2.0, 3.0], "trials": 10_000, "kappa_n_mc": 100_000, "point": 0,
               "t1_noise": 0.05, "t1_count": 20},
}
DISTRIBUTION_KEYS = {"kind", "dim", "mean", "sigma2", "bounds", "components"}
COMPONENT_KEYS = {"weight", "mean", "sigma2"}
LABELER_KEYS = {"theta", "bias"}


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    out_dir: str
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    failed_stage: str = None
    state: dict = field(default=None, repr=False)

    def to_dict(self):
        out = {
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "outputs": {name: self.outputs[name] for name in STAGES if name in self.outputs},
            "timings": {name: self.timings[name] for name in STAGES if name in self.timings},
        }
        if self.failed_stage:
            out["failed_stage"] = self.failed_stage
        return out


@dataclass
class RunContext:
    config: dict
    out_dir: str
    config_hash: str
    jobs: int = 1
    state: dict = field(default_factory=dict)

    @property
    def seed(self):
        return int(self.config["seed"])

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def stage_seed(self, *path):
        return derive_seed(self.seed, *path)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def _check_keys(where, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _check_distribution_keys(where, data):
    _check_keys(where, data, DISTRIBUTION_KEYS)
    for i, comp in enumerate(data.get("components") or []):
        _check_keys(f"{where}.components[{i}]", comp, COMPONENT_KEYS)


@contextlib.contextmanager
def _section(name):
    """Re-raise input errors met while validating a section as config errors."""
    try:
        yield
    except ConfigError:
        raise
    except (InputError, TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def normalize_config(raw, seed=None):
    """
    Merge defaults into every section and reject unknown keys.

    Args:
        raw: Parsed config dict
        seed: Optional override of the root seed

    Returns:
        New dict with every section complete
    """
    _check_keys("config", raw, {"schema_version", "seed"} | set(DEFAULTS))
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    config = {"schema_version": SCHEMA_VERSION, "seed": raw.get("seed", 0)}
    if seed is not None:
        config["seed"] = seed
    if not isinstance(config["seed"], int) or isinstance(config["seed"], bool) or config["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for name, defaults in DEFAULTS.items():
        section = raw.get(name, {})
        _check_keys(name, section, defaults)
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(section))
        config[name] = merged
    _check_distribution_keys("data.marginal", config["data"]["marginal"])
    _check_keys("data.labeler", config["data"]["labeler"], LABELER_KEYS)
    if config["stability"]["sampling"] is not None:
        _check_distribution_keys("stability.sampling", config["stability"]["sampling"])
    return config


def config_hash(config):
    """SHA-256 of the canonical JSON form of a normalized config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _step_sizes(config, problem):
    train = config["train"]
    n_steps = int(config["data"]["n"]) * int(train["epochs"])
    if train["step_sizes"] is not None:
        steps = np.asarray(train["step_sizes"], dtype=float)
        if steps.shape != (n_steps,):
            raise ConfigError(f"train.step_sizes needs {n_steps} entries, got {steps.size}")
        return steps
    return default_step_sizes(problem, n_steps, train["eta"])


def _n_queries(config):
    cf = config["counterfactual"]
    return len(cf["points"]) if cf["points"] is not None else int(cf["sample_negatives"])


def build_components(config):
    """
    Construct every configured object without running anything.

    Returns:
        Dict with marginal, labeled, problem, step_sizes, theta0, generator, sampling
    """
    data = config["data"]
    with _section("data"):
        n = int(data["n"])
        if n < 1:
            raise ConfigError("data.n must be >= 1")
        if not float(data["B"]) > 0.0:
            raise ConfigError("data.B must be positive")
        marginal = distribution_from_dict(data["marginal"])
        labeler = linear_sigmoid(data["labeler"]["theta"], data["labeler"].get("bias", 0.0))
        if labeler.dim != marginal.dim:
            raise ConfigError("data.labeler.theta must match the marginal's dimension")
    dim = marginal.dim

    train = config["train"]
    with _section("train"):
        if int(train["epochs"]) < 1:
            raise ConfigError("train.epochs must be >= 1")
        problem = bounded_problem(float(data["B"]), train["loss"])
        steps = _step_sizes(config, problem)
        if np.any(steps < 0.0):
            raise ConfigError("train step sizes must be non-negative")
        if np.any(steps > problem.loss.max_step * (1.0 + 1e-12)):
            raise ConfigError(f"train step size exceeds 2/alpha = {problem.loss.max_step:.6g}")
        theta0 = None
        if train["theta0"] is not None:
            theta0 = np.asarray(train["theta0"], dtype=float)
            if theta0.shape != (dim,) or np.linalg.norm(theta0) > problem.theta_bound:
                raise ConfigError("train.theta0 must be a point of the unit ball in feature dimension")

    perturb = config["perturb"]
    with _section("perturb"):
        if perturb["generator"] not in GENERATORS:
            raise ConfigError(f"unknown perturb.generator '{perturb['generator']}'")
        generator = GeneratorSpec(
            kind=perturb["generator"], r=int(perturb["r"]),
            positions=None if perturb["positions"] is None else tuple(perturb["positions"]),
            delta=float(perturb["delta"]),
            shift=None if perturb["shift"] is None else tuple(perturb["shift"]),
            noise=float(perturb["noise"]), antithetic=bool(perturb["antithetic"]))
        if generator.kind.startswith("retrain"):
            perturbation_positions(n, generator.r, generator.positions)
        if generator.kind == "retrain-perturbed" and int(train["epochs"]) != 1:
            raise ConfigError("retrain-perturbed needs train.epochs = 1")
        if generator.shift is not None and len(generator.shift) != dim:
            raise ConfigError("perturb.shift must match the feature dimension")
        if int(perturb["count"]) < 1:
            raise ConfigError("perturb.count must be >= 1")

    prof = config["profile"]
    with _section("profile"):
        if int(prof["n_mc"]) < 2 or int(prof["n_test"]) < 1 or int(prof["n_boot"]) < 1:
            raise ConfigError("profile needs n_mc >= 2, n_test >= 1 and n_boot >= 1")

    cf = config["counterfactual"]
    with _section("counterfactual"):
        if cf["norm"] not in NORMS or cf["mode"] not in MODES:
            raise ConfigError(f"counterfactual.norm must be one of {NORMS} and mode one of {MODES}")
        if cf["points"] is not None:
            pts = np.atleast_2d(np.asarray(cf["points"], dtype=float))
            if pts.shape[0] == 0 or pts.shape[1] != dim:
                raise ConfigError("counterfactual.points must be non-empty rows of feature dimension")
        elif int(cf["sample_negatives"]) < 1:
            raise ConfigError("counterfactual.sample_negatives must be >= 1")
        slacks = list(cf["margin_slacks"])
        if not slacks or any(not 0.0 <= float(s) < 0.5 for s in slacks):
            raise ConfigError("counterfactual.margin_slacks must be non-empty values in [0, 0.5)")

    st = config["stability"]
    with _section("stability"):
        sampling = None if st["sampling"] is None else distribution_from_dict(st["sampling"])
        if sampling is not None and sampling.dim != dim:
            raise ConfigError("stability.sampling must match the feature dimension")
        StabilityConfig(k=int(st["k"]), sigma2=None if st["sigma2"] is None else float(st["sigma2"]),
                        sampling=sampling, tau=float(st["tau"]))
        if any(not 0.0 <= float(t) <= 1.0 for t in st["taus"]):
            raise ConfigError("stability.taus must lie in [0,1]")

    bc = config["bounds"]
    with _section("bounds"):
        unknown = set(bc["theorems"]) - {"T1", "T2", "T3"}
        if unknown:
            raise ConfigError(f"unknown theorem(s) {sorted(unknown)}")
        if any(int(k) < 1 for k in bc["k"]) or any(not float(e) > 0.0 for e in bc["epsilon"]) \
                or any(not float(v) > 0.0 for v in bc["ell"]):
            raise ConfigError("bounds grid needs k >= 1, epsilon > 0 and ell > 0")
        if not bc["k"] or not bc["epsilon"] or ("T2" in bc["theorems"] and not bc["ell"]):
            raise ConfigError("bounds grid lists must be non-empty")
        if int(bc["trials"]) < 1 or int(bc["kappa_n_mc"]) < 2:
            raise ConfigError("bounds needs trials >= 1 and kappa_n_mc >= 2")
        if isinstance(bc["point"], int):
            if not 0 <= bc["point"] < _n_queries(config):
                raise ConfigError("bounds.point indexes past the counterfactual queries")
        elif len(bc["point"]) != dim:
            raise ConfigError("bounds.point must be a query index or a feature vector")
        if float(bc["t1_noise"]) < 0.0 or int(bc["t1_count"]) < 1:
            raise ConfigError("bounds needs t1_noise >= 0 and t1_count >= 1")

    return {
        "marginal": marginal,
        "labeled": LabeledDistribution(marginal=marginal, labeler=labeler),
        "problem": problem,
        "step_sizes": steps,
        "theta0": theta0,
        "generator": generator,
        "sampling": sampling,
    }


def prepare_config(raw, seed=None):
    """Normalize and fully validate a config; nothing is computed."""
    config = normalize_config(raw, seed)
    build_components(config)
    return config


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _write_csv(ctx, name, frame):
    return write_csv(ctx.path(name), frame, ctx.config_hash, ctx.seed)


def _write_json(ctx, name, payload):
    return write_json(ctx.path(name), payload, ctx.config_hash, ctx.seed)


def _run_synthesize(ctx):
    c = ctx.state["components"]
    data_cfg = ctx.config["data"]
    X, y = sample_labeled(c["labeled"], int(data_cfg["n"]), ctx.stage_seed("synthesize"),
                          B=float(data_cfg["B"]))
    data = Dataset(X, y)
    _write_csv(ctx, "dataset.csv", dataset_frame(data))
    ctx.state["data"] = data
    logger.info("synthesized %d examples (%d positive)", len(data), int(np.sum(y > 0)))


def _load_synthesize(ctx):
    ctx.state["data"] = load_dataset(ctx.path("dataset.csv"))


def _run_train(ctx):
    c = ctx.state["components"]
    data = ctx.state["data"]
    trace = gd_train(c["problem"], data, c["step_sizes"], c["theta0"], epochs=int(ctx.config["train"]["epochs"]))
    model = linear_sigmoid(trace.final)
    loss = average_loss(c["problem"], trace.final, data)
    save_model(ctx.path("model.json"), model, ctx.config_hash, ctx.seed,
               extra={"average_loss": loss, "steps": int(trace.step_sizes.shape[0])})
    _write_csv(ctx, "trace.csv", trace_to_frame(trace))
    ctx.state["model"] = model
    logger.info("trained m: theta=%s, average loss %.4f", np.array2string(trace.final, precision=4), loss)


def _load_train(ctx):
    ctx.state["model"] = load_model(ctx.path("model.json"))


def _divergence_frames(ens):
    summary, trace = [], []
    for i, joint in enumerate(ens.divergences or []):
        summary.append({"member": i, "delta_final": float(joint.deltas[-1]), "bound": joint.bound,
                        "r": len(joint.differing)})
        for t, (d, b) in enumerate(zip(joint.deltas, joint.prefix_bounds)):
            trace.append({"member": i, "t": t, "delta_t": float(d), "analytic_bound_prefix": float(b)})
    return (pd.DataFrame(summary, columns=["member", "delta_final", "bound", "r"]),
            pd.DataFrame(trace, columns=["member", "t", "delta_t", "analytic_bound_prefix"]))


def _run_ensemble(ctx):
    c = ctx.state["components"]
    pc = ctx.config["perturb"]
    setup = TrainingSetup(problem=c["problem"], data=ctx.state["data"], step_sizes=c["step_sizes"],
                          theta0=c["theta0"], source=c["labeled"], epochs=int(ctx.config["train"]["epochs"]))
    ens = generate_ensemble(c["generator"], int(pc["count"]), ctx.stage_seed("ensemble"),
                            base=ctx.state["model"], setup=setup, jobs=ctx.jobs)
    member_files = []
    for i, M in enumerate(ens.members):
        name = os.path.join("members", f"member_{i:03d}.json")
        save_model(ctx.path(name), M, ctx.config_hash, ctx.seed)
        member_files.append(name)
    differing = list(ens.divergences[0].differing) if ens.divergences else None
    _write_json(ctx, "ensemble.json", {
        "generator": generator_to_dict(ens.generator),
        "count": ens.size,
        "ensemble_seed": ens.seed,
        "member_seeds": [int(s) for s in ens.member_seeds],
        "original": model_to_dict(ens.original),
        "members": member_files,
        "differing": differing,
    })
    summary, trace = _divergence_frames(ens)
    _write_csv(ctx, "divergence.csv", summary)
    _write_csv(ctx, "divergence_trace.csv", trace)
    ctx.state["ensemble"] = ens
    ctx.state["differing"] = differing
    ctx.state["member_files"] = member_files
    if ens.divergences:
        logger.info("ensemble divergence: max delta %.4g, analytic bound %.4g",
                    float(summary["delta_final"].max()), float(summary["bound"].max()))


def _load_ensemble(ctx):
    meta = load_json(ctx.path("ensemble.json"))
    gen = dict(meta["generator"])
    for key in ("positions", "shift"):
        if gen.get(key) is not None:
            gen[key] = tuple(gen[key])
    members = [load_model(ctx.path(name)) for name in meta["members"]]
    ctx.state["ensemble"] = ModelChangeEnsemble(
        original=model_from_dict(meta["original"]), members=members, generator=GeneratorSpec(**gen),
        seed=int(meta["ensemble_seed"]), member_seeds=list(meta["member_seeds"]))
    ctx.state["differing"] = meta["differing"]
    ctx.state["member_files"] = list(meta["members"])


def _run_profile(ctx):
    c = ctx.state["components"]
    pc = ctx.config["profile"]
    profile = estimate_profile(ctx.state["ensemble"], c["marginal"], int(pc["n_mc"]), ctx.stage_seed("profile"),
                               int(pc["n_test"]), int(pc["n_boot"]), ctx.jobs)
    payload = profile_to_dict(profile)
    consistency = None
    if ctx.state.get("differing") is not None:
        bound = theorem3_bound_delta(c["problem"].loss, c["step_sizes"], ctx.state["differing"])
        consistency = theorem3_consistency(profile.distances, profile.distance_stderrs, bound)
        payload["theorem3"] = consistency
    _write_json(ctx, "profile.json", payload)
    ctx.state["profile"] = profile
    if consistency and consistency["violations"]:
        raise BoundViolationError(
            f"{consistency['violations']} member(s) exceed the retraining L2 bound {consistency['bound']:.4g}")


def _load_profile(ctx):
    ctx.state["profile"] = profile_from_dict(load_json(ctx.path("profile.json")))


def sample_negative_queries(model, marginal, count, seed, B=None, max_rounds=100):
    """
    First `count` points from a seeded stream of the marginal (pulled into the B-ball)
    that the model classifies negative.
    """
    found = []
    for round_ in range(max_rounds):
        X = sample(marginal, 4 * count, derive_seed(seed, "queries", round_))
        if B is not None:
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            X = X * np.minimum(1.0, B / np.maximum(norms, 1e-300))
        found.extend(X[np.atleast_1d(predict(model, X)) < 0.5])
        if len(found) >= count:
            return np.array(found[:count])
    raise InfeasibilityError(f"found only {len(found)} negative points in {max_rounds} rounds")


def counterfactual_frame(X, queries, results):
    """Table query, x_*, margin_slack, xbar_*, cost, valid, method."""
    frame = points_frame(X)
    frame.insert(0, "query", np.arange(len(queries)))
    frame["margin_slack"] = [q.margin_slack for q in queries]
    xbar = points_frame(np.stack([r.xbar for r in results]), prefix="xbar_")
    frame = pd.concat([frame, xbar], axis=1)
    frame["cost"] = [r.cost for r in results]
    frame["valid"] = [r.valid for r in results]
    frame["method"] = [r.method for r in results]
    return frame


def counterfactuals_for_points(model, points, norm="l2", mode="free", manifold=None, margin_slacks=(0.0,), jobs=1):
    """
    Counterfactuals for a batch of query points; slacks cycle over the queries.

    Returns:
        (queries, results, frame)
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    slacks = list(margin_slacks)
    queries = [CounterfactualQuery(x=x, norm=norm, mode=mode, manifold=manifold,
                                   margin_slack=float(slacks[i % len(slacks)]))
               for i, x in enumerate(X)]
    results = find_counterfactuals(model, queries, jobs)
    return queries, results, counterfactual_frame(X, queries, results)


def _run_counterfactuals(ctx):
    c = ctx.state["components"]
    cf = ctx.config["counterfactual"]
    model = ctx.state["model"]
    if cf["points"] is not None:
        X = np.atleast_2d(np.asarray(cf["points"], dtype=float))
    else:
        X = sample_negative_queries(model, c["marginal"], int(cf["sample_negatives"]),
                                    ctx.stage_seed("counterfactuals"), B=float(ctx.config["data"]["B"]))
    manifold = ctx.state["data"].X if cf["mode"] == "manifold" else None
    _, results, frame = counterfactuals_for_points(model, X, cf["norm"], cf["mode"], manifold,
                                                   cf["margin_slacks"], ctx.jobs)
    _write_csv(ctx, "counterfactuals.csv", frame)
    ctx.state["queries"] = X
    ctx.state["xbar"] = np.stack([r.xbar for r in results])
    logger.info("generated %d counterfactuals, mean cost %.4g", len(results), float(frame["cost"].mean()))


def _load_counterfactuals(ctx):
    frame = read_csv(ctx.path("counterfactuals.csv"))
    ctx.state["queries"] = frame_points(frame)
    ctx.state["xbar"] = frame_points(frame, prefix="xbar_")


def stability_config(config, sampling, seed, k=None):
    st = config["stability"]
    return StabilityConfig(k=int(st["k"] if k is None else k),
                           sigma2=None if st["sigma2"] is None else float(st["sigma2"]),
                           sampling=sampling, tau=float(st["tau"]), seed=int(seed))


def score_points(model, points, k, sigma2, tau, gamma=None, seed=0, sampling=None, jobs=1):
    """
    Stability report dicts for a batch of points; point i uses derive_seed(seed, "stability", i).
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))

    def score(i):
        cfg = StabilityConfig(k=int(k), sigma2=sigma2, sampling=sampling, tau=float(tau),
                              seed=derive_seed(seed, "stability", i))
        out = report_to_dict(stability_report(model, X[i], cfg, gamma=gamma), cfg)
        out["query"] = i
        return out

    return parallel_map(score, range(X.shape[0]), jobs)


def _run_stability(ctx):
    c = ctx.state["components"]
    st = ctx.config["stability"]
    ens = ctx.state["ensemble"]
    xbar = ctx.state["xbar"]
    gamma = ctx.state["profile"].gamma
    rows = score_points(ctx.state["model"], xbar, st["k"], st["sigma2"], st["tau"], gamma=gamma,
                        seed=ctx.seed, sampling=c["sampling"], jobs=ctx.jobs)
    for row, xb in zip(rows, xbar):
        row["validity"] = validity_under_change(ens, xb)
    rhats = [r["Rhat"] for r in rows]
    validity = [r["validity"] for r in rows]
    cohorts = cohort_split(rhats, validity, float(st["tau"]))
    _write_json(ctx, "stability.json", {"gamma": gamma, "reports": rows, "cohorts": cohorts})
    _write_csv(ctx, "validity.csv", pd.DataFrame(validity_by_tau(rhats, validity, st["taus"]),
                                                 columns=["tau", "cohort_size", "validity_rate"]))
    ctx.state["stability"] = rows
    logger.info("robustness test at tau=%.2f: %d pass (validity %.3f), %d fail (validity %.3f)",
                cohorts["tau"], cohorts["pass_size"], cohorts["pass_validity"],
                cohorts["fail_size"], cohorts["fail_validity"])


def _load_stability(ctx):
    ctx.state["stability"] = load_json(ctx.path("stability.json"))["reports"]


def _skip_grid(template, ks, epsilons, ells, seed, reason):
    ells = ells if template.theorem == "T2" else (None,)
    return [skipped_report(replace(template, k=int(k), epsilon=float(e),
                                   ell=template.ell if ell is None else float(ell)), seed, reason)
            for k in ks for e in epsilons for ell in ells]


def _verification_point(ctx):
    point = ctx.config["bounds"]["point"]
    if isinstance(point, int):
        return ctx.state["xbar"][point]
    return np.asarray(point, dtype=float)


def _run_bounds(ctx):
    c = ctx.state["components"]
    bc = ctx.config["bounds"]
    pc = ctx.config["profile"]
    model = ctx.state["model"]
    profile = ctx.state["profile"]
    ks, eps, ells = [int(k) for k in bc["k"]], [float(e) for e in bc["epsilon"]], [float(v) for v in bc["ell"]]
    trials = int(bc["trials"])
    x = _verification_point(ctx)
    cfg = stability_config(ctx.config, c["sampling"], seed=0, k=ks[0])
    mu_tilde = sampling_distribution(cfg, x)

    try:
        kap = kappa(mu_tilde, c["marginal"], int(bc["kappa_n_mc"]), ctx.stage_seed("bounds", "kappa"))
        logger.info("kappa at the verification point: %.4g (se %.2g)", kap.value, kap.stderr)
    except AbsoluteContinuityError as e:
        logger.warning("kappa unavailable: %s", e)
        kap = float("inf")
    ctx.state["kappa"] = float(kap)

    reports = []
    for theorem in bc["theorems"]:
        seed = ctx.stage_seed("bounds", theorem)
        if theorem == "T1":
            template = BoundQuery("T1", epsilon=eps[0], k=ks[0], gamma=float(lipschitz_constant(model)),
                                  gamma_m=float(lipschitz_constant(model)),
                                  sigma2=float(ctx.config["stability"]["sigma2"] or 1.0))
            if c["sampling"] is not None:
                reports += _skip_grid(template, ks, eps, ells, seed, "needs gaussian local sampling")
                continue
            t1 = generate_ensemble(GeneratorSpec("output-noise", noise=float(bc["t1_noise"])),
                                   int(bc["t1_count"]), ctx.stage_seed("bounds", "t1-ensemble"), base=model)
            points = sample(c["marginal"], int(pc["n_test"]), ctx.stage_seed("bounds", "t1-points"))
            nomc = check_nomc(t1, c["marginal"], points, int(pc["n_boot"]), ctx.stage_seed("bounds", "t1-bootstrap"))
            if nomc["rejected"] or not nomc["lipschitz_ok"]:
                reports += _skip_grid(template, ks, eps, ells, seed, "ensemble is not NOMC-consistent")
                continue
            template = replace(template, gamma=nomc["gamma"])
            reports += verify_grid(t1, x, cfg, template, ks, eps, trials=trials, seed=seed, jobs=ctx.jobs)
        elif theorem == "T2":
            template = BoundQuery("T2", epsilon=eps[0], k=ks[0], gamma=profile.gamma, ell=ells[0],
                                  delta=profile.delta.value, nu=profile.nu, kappa=kap)
            reports += verify_grid(ctx.state["ensemble"], x, cfg, template, ks, eps, ells,
                                   trials=trials, seed=seed, jobs=ctx.jobs)
        else:
            template = BoundQuery("T3", epsilon=eps[0], k=ks[0], gamma=profile.gamma, loss=c["problem"].loss,
                                  step_sizes=c["step_sizes"], differing_steps=tuple(ctx.state.get("differing") or ()),
                                  kappa=kap)
            if ctx.state.get("differing") is None:
                reports += _skip_grid(template, ks, eps, ells, seed, "needs a retrain-perturbed ensemble")
                continue
            reports += verify_grid(ctx.state["ensemble"], x, cfg, template, ks, eps,
                                   trials=trials, seed=seed, jobs=ctx.jobs)

    _write_csv(ctx, "bounds.csv", reports_to_frame(reports))
    ctx.state["bounds"] = reports
    violated = [r for r in reports if r.violated]
    if violated:
        raise BoundViolationError(f"{len(violated)} grid point(s) violate their bound")


def _load_bounds(ctx):
    ctx.state["bounds"] = reports_from_frame(read_csv(ctx.path("bounds.csv")))


RUNNERS = {
    "synthesize": _run_synthesize,
    "train": _run_train,
    "ensemble": _run_ensemble,
    "profile": _run_profile,
    "counterfactuals": _run_counterfactuals,
    "stability": _run_stability,
    "bounds": _run_bounds,
}
LOADERS = {
    "synthesize": _load_synthesize,
    "train": _load_train,
    "ensemble": _load_ensemble,
    "profile": _load_profile,
    "counterfactuals": _load_counterfactuals,
    "stability": _load_stability,
    "bounds": _load_bounds,
}


def stage_outputs(ctx, name):
    """Relative paths of a stage's artifacts that exist on disk."""
    files = list(STAGE_FILES[name])
    if name == "ensemble":
        files += ctx.state.get("member_files", [])
    return [f for f in files if os.path.exists(ctx.path(f))]


def stage_complete(ctx, name):
    """All of a stage's artifacts exist and carry this run's config hash."""
    for f in STAGE_FILES[name]:
        if read_header(ctx.path(f)).get("config_hash") != ctx.config_hash:
            return False
    if name == "ensemble":
        members = load_json(ctx.path("ensemble.json"))["members"]
        return all(os.path.exists(ctx.path(m)) for m in members)
    return True


def _load_stage(ctx, name):
    if not stage_complete(ctx, name):
        raise DependencyError(name, f"stage '{name}' has no outputs for this config in {ctx.out_dir}")
    LOADERS[name](ctx)


def _previous_manifest(ctx):
    path = ctx.path("manifest.json")
    if not os.path.exists(path):
        return {}
    data = load_json(path)
    return data if data.get("config_hash") == ctx.config_hash else {}


def _write_manifest(ctx, manifest):
    write_json(ctx.path("manifest.json"), manifest.to_dict())


def run_pipeline(config, out_dir, jobs=1, stage=None, resume=False):
    """
    Run the experiment described by `config` and write its artifacts to out_dir.

    Args:
        config: Config dict (raw or normalized)
        out_dir: Output directory
        jobs: Worker cap for stage-internal parallelism; results do not depend on it
        stage: Run only this stage, loading upstream artifacts from out_dir
        resume: Reuse every stage whose artifacts carry the current config hash

    Returns:
        RunManifest

    Raises:
        StageError: wrapping the error of the failing stage; outputs so far are kept
    """
    config = prepare_config(config)
    if stage is not None and stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}'; expected one of {', '.join(STAGES)}")
    os.makedirs(out_dir, exist_ok=True)
    ctx = RunContext(config=config, out_dir=out_dir, config_hash=config_hash(config), jobs=jobs)
    ctx.state["components"] = build_components(config)
    manifest = RunManifest(config_hash=ctx.config_hash, version=__version__, seed=ctx.seed, out_dir=out_dir)
    previous = _previous_manifest(ctx)
    manifest.outputs.update(previous.get("outputs", {}))
    manifest.timings.update(previous.get("timings", {}))

    if stage is None:
        targets = STAGES
    else:
        for name in STAGES[:STAGES.index(stage)]:
            _load_stage(ctx, name)
        targets = (stage,)

    for name in targets:
        if stage is None and resume and stage_complete(ctx, name):
            logger.info("stage %s: reusing outputs", name)
            LOADERS[name](ctx)
            manifest.outputs[name] = stage_outputs(ctx, name)
            continue
        logger.info("stage %s: start", name)
        started = time.perf_counter()
        try:
            RUNNERS[name](ctx)
        except Exception as e:
            manifest.outputs[name] = stage_outputs(ctx, name)
            manifest.failed_stage = name
            _write_manifest(ctx, manifest)
            logger.error("stage %s failed: %s", name, e)
            raise StageError(name, e) from e
        manifest.timings[name] = round(time.perf_counter() - started, 3)
        manifest.outputs[name] = stage_outputs(ctx, name)
        logger.info("stage %s: done in %.2fs", name, manifest.timings[name])

    _write_manifest(ctx, manifest)
    manifest.state = ctx.state
    return manifest


def verify_bounds(config, out_dir, jobs=1):
    """Run (or reuse) every stage up to the bound grid; returns the verification reports."""
    manifest = run_pipeline(config, out_dir, jobs=jobs, resume=True)
    return manifest.state["bounds"]


def emit_plot_data(source, figure, render=False):
    """
    Long-format table behind one figure, written next to the run's artifacts.

    Args:
        source: RunManifest or output directory of a run
        figure: bound-curves | validity-vs-tau | divergence-trace
        render: Also write a plotly HTML rendering

    Returns:
        Path of the CSV (and of the HTML when rendered)
    """
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure '{figure}'; expected one of {', '.join(FIGURES)}")
    out_dir = source.out_dir if isinstance(source, RunManifest) else source
    stage, name, columns = FIGURES[figure]
    src = os.path.join(out_dir, name)
    if not os.path.exists(src):
        raise DependencyError(stage, f"figure '{figure}' needs the outputs of stage '{stage}'")
    header = read_header(src)
    frame = read_csv(src)[columns]
    path = os.path.join(out_dir, f"plot_{figure.replace('-', '_')}.csv")
    write_csv(path, frame, header.get("config_hash"), header.get("seed", 0))
    logger.info("wrote %d rows of %s to %s", len(frame), figure, path)
    if not render:
        return path
    from visualizations import render_figure

    html = render_figure(figure, frame, path[:-len(".csv")] + ".html")
    return path, html


# ---------------------------------------------------------------------------
# Selftest
# ---------------------------------------------------------------------------

def selftest(seed=0):
    """
    Fast property suites: loss constants, gradients, expansivity and boundedness,
    kappa identity, closed-form counterfactuals and stability dominance.

    Returns:
        List of dicts {name, passed, detail}
    """
    results = []

    def record(name, passed, detail):
        results.append({"name": name, "passed": bool(passed), "detail": detail})
        logger.info("selftest %-22s %s  %s", name, "ok" if passed else "FAIL", detail)

    loss = LossFunction(kind="logistic", B=1.0)
    problem = bounded_problem(1.0)
    constants = check_loss_constants(loss, seed=derive_seed(seed, "selftest", "constants"))
    bad = constants["lipschitz_violations"] + constants["smoothness_violations"] \
        + constants["admissibility_violations"]
    record("loss-constants", bad == 0, f"{bad} violations in {constants['n_triples']} triples")

    grad = gradient_check(loss, seed=derive_seed(seed, "selftest", "gradient"))
    record("gradient", grad["max_relative_error"] <= 1e-6, f"max relative error {grad['max_relative_error']:.2e}")

    for eta in (loss.max_step, 1.0 / loss.alpha):
        exp_ = check_expansive(loss, eta, problem, seed=derive_seed(seed, "selftest", "expansive"))
        record(f"expansive eta={eta:g}", exp_["max_ratio"] <= 1.0 + 1e-9, f"max ratio {exp_['max_ratio']:.12f}")
        bnd = check_bounded(loss, eta, problem, seed=derive_seed(seed, "selftest", "bounded"))
        record(f"bounded eta={eta:g}", bnd["max_step"] <= bnd["bound"] + 1e-12,
               f"max step {bnd['max_step']:.6g} <= {bnd['bound']:.6g}")

    mu = gaussian([0.0, 0.0], 0.25)
    k_same = kappa(mu, mu, 10_000, derive_seed(seed, "selftest", "kappa"))
    record("kappa-identity", k_same.value == 1.0, f"kappa(mu, mu) = {k_same.value!r}")

    rng = make_rng(derive_seed(seed, "selftest", "counterfactual"))
    worst = 0.0
    for _ in range(100):
        model = linear_sigmoid(rng.normal(size=2), rng.normal())
        x = rng.normal(size=2)
        if predict(model, x) >= 0.5:
            x = x - 2.0 * (model.theta @ x + model.bias) / (model.theta @ model.theta) * model.theta
        if predict(model, x) >= 0.5:
            continue
        q = CounterfactualQuery(x=x)
        result = find_counterfactuals(model, [q])[0]
        expected = (logit(0.5) - (model.theta @ x + model.bias)) / np.linalg.norm(model.theta)
        worst = max(worst, abs(result.cost - expected))
    record("closed-form-cf", worst <= 1e-9, f"max |cost - projection| {worst:.2e}")

    violations = 0
    for i in range(100):
        model = linear_sigmoid(rng.normal(size=2) * 2.0, rng.normal())
        x = rng.normal(size=2)
        cfg = StabilityConfig(k=50, sigma2=float(rng.uniform(0.01, 1.0)), seed=derive_seed(seed, "dominance", i))
        gamma = float(lipschitz_constant(model))
        samples = sample(gaussian(x, cfg.sigma2), cfg.k, cfg.seed)
        if stability_Rhat(model, x, cfg, samples) < stability_R(model, gamma, x, cfg, samples) - 1e-12:
            violations += 1
    record("stability-dominance", violations == 0, f"{violations} violations in 100 draws")
    return results
