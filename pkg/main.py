"""
Command-line entry point for counterfactual robustness experiments.

    python main.py run --config configs/reference.json --out runs/ref
    python main.py selftest
"""
import argparse
import logging
import os
import sys

from robustness import __version__
from robustness.pipeline import (FIGURES, STAGES, config_hash, counterfactuals_for_points, emit_plot_data,
                                 prepare_config, run_pipeline, score_points, selftest, verify_bounds)
from robustness.stability import cohort_split
from utils.assessment import (assess_profile, assess_robustness, assess_verification,
                              get_rhat_interpretation)
from utils.data_loader import load_config, load_dataset, load_json, load_model, load_points, write_csv, write_json
from utils.errors import RobustnessError

logger = logging.getLogger("robustness")


def _print_assessment(title, assessment):
    print(f"{title}: {assessment['overall_rating']}")
    for key, mark in (("strengths", "+"), ("areas_for_improvement", "-"),
                      ("recommendations", ">"), ("technical_notes", "*")):
        for line in assessment[key]:
            print(f"  {mark} {line}")


def cmd_run(args):
    config = prepare_config(load_config(args.config), seed=args.seed)
    manifest = run_pipeline(config, args.out, jobs=args.jobs, stage=args.stage, resume=args.resume)
    print(f"config_hash={manifest.config_hash} seed={manifest.seed} out={args.out}")
    profile_path = os.path.join(args.out, "profile.json")
    if os.path.exists(profile_path) and (args.stage in (None, "profile")):
        _print_assessment("model change", assess_profile(load_json(profile_path)))
    if "stability" in manifest.state:
        reports = manifest.state["stability"]
        cohorts = cohort_split([r["Rhat"] for r in reports], [r.get("validity", float("nan")) for r in reports],
                               config["stability"]["tau"])
        _print_assessment("robustness test", assess_robustness(reports, cohorts))
    if "bounds" in manifest.state and args.stage in (None, "bounds"):
        _print_assessment("bound verification",
                          assess_verification(manifest.state["bounds"], manifest.state.get("kappa")))
    return 0


def cmd_verify_bounds(args):
    config = prepare_config(load_config(args.config), seed=args.seed)
    reports = verify_bounds(config, args.out, jobs=args.jobs)
    _print_assessment("bound verification", assess_verification(reports))
    return 0


def _arg_hash(args, keys):
    return config_hash({key: getattr(args, key) for key in keys})


def cmd_stability(args):
    model = load_model(args.model)
    points = load_points(args.queries)
    reports = score_points(model, points, args.k, args.sigma2, args.tau, gamma=args.gamma,
                           seed=args.seed, jobs=args.jobs)
    digest = _arg_hash(args, ("model", "queries", "k", "sigma2", "tau", "gamma"))
    path = write_json(os.path.join(args.out, "stability.json"), {"reports": reports}, digest, args.seed)
    for r in reports:
        print(f"query {r['query']}: Rhat={r['Rhat']:.4f} pass={r['pass']}  {get_rhat_interpretation(r['Rhat'], r['tau'])}")
    _print_assessment("robustness test", assess_robustness(reports))
    print(f"wrote {path}")
    return 0


def cmd_counterfactual(args):
    model = load_model(args.model)
    points = load_points(args.queries)
    manifold = load_dataset(args.manifold).X if args.manifold else None
    _, results, frame = counterfactuals_for_points(model, points, args.norm, args.mode, manifold,
                                                   (args.margin_slack,), jobs=args.jobs)
    digest = _arg_hash(args, ("model", "queries", "norm", "mode", "manifold", "margin_slack"))
    path = write_csv(os.path.join(args.out, "counterfactuals.csv"), frame, digest, 0)
    for i, r in enumerate(results):
        print(f"query {i}: cost={r.cost:.6g} valid={r.valid} method={r.method}")
    print(f"wrote {path}")
    return 0


def cmd_emit_plot_data(args):
    out = emit_plot_data(args.out, args.figure, render=args.render)
    for path in (out if isinstance(out, tuple) else (out,)):
        print(f"wrote {path}")
    return 0


def cmd_selftest(args):
    results = selftest(args.seed)
    for r in results:
        print(f"{'ok  ' if r['passed'] else 'FAIL'} {r['name']:<22} {r['detail']}")
    failed = [r for r in results if not r["passed"]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 5


def build_parser():
    parser = argparse.ArgumentParser(prog="main.py", description="Counterfactual robustness under model change")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stage", choices=STAGES, default=None, help="run a single stage")
    p.add_argument("--resume", action="store_true", help="reuse stages whose outputs match the config")
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-bounds", help="run or reuse the pipeline and verify the bound grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("stability", help="score points with the robustness test")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True, help="CSV with columns x_0 .. x_{d-1}")
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--sigma2", type=float, default=0.01)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--gamma", type=float, default=None, help="Lipschitz bound; R is reported only when given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("counterfactual", help="generate counterfactuals for query points")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True, help="CSV with columns x_0 .. x_{d-1}")
    p.add_argument("--norm", choices=("l2", "l1"), default="l2")
    p.add_argument("--mode", choices=("free", "manifold"), default="free")
    p.add_argument("--manifold", default=None, help="dataset CSV of candidate points")
    p.add_argument("--margin-slack", type=float, default=0.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("emit-plot-data", help="write the table behind a figure")
    p.add_argument("--out", required=True, help="output directory of a run")
    p.add_argument("--figure", choices=sorted(FIGURES), required=True)
    p.add_argument("--render", action="store_true", help="also write a plotly HTML file")
    p.set_defaults(func=cmd_emit_plot_data)

    p = sub.add_parser("selftest", help="run the fast property suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RobustnessError as e:
        logger.error("%s [%s]", e, e.code)
        return e.exit_code
    except Exception:
        logger.exception("internal error")
        return 5


if __name__ == "__main__":
    sys.exit(main())
