"""
Assessment of experiment reports.
Turns verification grids, model-change profiles and robustness-test results into
readable verdicts for the command line.
"""


def _rate(assessment):
    """Fill overall_rating from the counts of strengths and issues."""
    strength_count = len(assessment["strengths"])
    issue_count = len(assessment["areas_for_improvement"])

    if strength_count >= 3 and issue_count == 0:
        assessment["overall_rating"] = "Excellent"
    elif strength_count >= 2 and issue_count <= 1:
        assessment["overall_rating"] = "Good"
    elif strength_count >= 1:
        assessment["overall_rating"] = "Inconclusive"
    else:
        assessment["overall_rating"] = "Failing"
    return assessment


def _new_assessment():
    return {
        "overall_rating": "",
        "strengths": [],
        "areas_for_improvement": [],
        "recommendations": [],
        "technical_notes": []
    }


def assess_verification(reports, kappa=None):
    """
    Assess a bound verification grid.

    Args:
        reports: List of VerificationReport
        kappa: kappa at the verification point, when known

    Returns:
        Dict with assessment results and recommendations
    """
    assessment = _new_assessment()
    checked = [r for r in reports if r.status == "ok" and not r.vacuous]
    violated = [r for r in checked if r.violated]
    vacuous = [r for r in reports if r.vacuous]
    skipped = [r for r in reports if r.status != "ok"]

    if not reports:
        assessment["areas_for_improvement"].append("No grid points were evaluated")
        return _rate(assessment)

    if violated:
        worst = max(violated, key=lambda r: r.ci_lo - r.rhs)
        assessment["areas_for_improvement"].append(
            f"{len(violated)} grid point(s) violated - worst at {worst.theorem} k={worst.k} "
            f"eps={worst.epsilon:g} (ci_lo {worst.ci_lo:.4g} > bound {worst.rhs:.4g})"
        )
        assessment["recommendations"].append(
            "Check that the ensemble satisfies the assumptions of the violated theorem "
            "(NOMC checks, Lipschitz bound, kappa reliability)"
        )
    elif checked:
        assessment["strengths"].append(
            f"All {len(checked)} non-vacuous grid points hold at 99% confidence"
        )

    theorems = sorted({r.theorem for r in checked})
    if len(theorems) >= 2:
        assessment["strengths"].append(f"Several guarantees verified: {', '.join(theorems)}")

    if checked and min(r.trials for r in checked) >= 10_000:
        assessment["strengths"].append("At least 10^4 trials per grid point")
    elif checked:
        assessment["technical_notes"].append(
            "Fewer than 10^4 trials at some grid points - intervals are wide"
        )

    if vacuous:
        assessment["technical_notes"].append(
            f"{len(vacuous)} grid point(s) have a bound >= 1 and are excluded from pass/fail"
        )
    if skipped:
        assessment["areas_for_improvement"].append(
            f"{len(skipped)} grid point(s) skipped (kappa unavailable or assumptions not met)"
        )

    tight = [r for r in checked if r.rhs > 0 and r.frequency > 0.5 * r.rhs]
    if tight:
        assessment["technical_notes"].append(
            f"{len(tight)} grid point(s) reach at least half their bound"
        )

    if kappa is not None:
        assessment["technical_notes"].append(f"kappa={kappa:.4g}: {get_kappa_interpretation(kappa)}")

    return _rate(assessment)


def get_regime_interpretation(regime):
    """
    Get interpretation of a model-change regime label.

    Args:
        regime: "NOMC-consistent", "GOMC-only" or "neither"

    Returns:
        String interpretation
    """
    if regime == "NOMC-consistent":
        return "Changed models are unbiased around m - both the pointwise and the distance-based guarantees apply"
    elif regime == "GOMC-only":
        return "Changed models drift from m on average - only the distance-based guarantees apply"
    else:
        return "No finite Lipschitz bound for the ensemble - no guarantee applies"


def get_kappa_interpretation(kappa):
    """
    Get interpretation of the density-ratio norm kappa.

    Args:
        kappa: kappa(mu_tilde, mu)

    Returns:
        String interpretation
    """
    if kappa != kappa or kappa == float("inf"):
        return "Sampling distribution is too wide relative to the data - kappa is infinite"
    elif kappa < 1.5:
        return "Local samples look like the data distribution - model change transfers almost undamped"
    elif kappa < 10:
        return "Moderate mismatch between local samples and data - bound offsets grow by kappa"
    else:
        return "Local samples sit far from the data mass - bound offsets are large and guarantees weak"


def assess_profile(profile):
    """
    Assess a model-change profile.

    Args:
        profile: Profile dict as written to profile.json

    Returns:
        Dict with assessment results and recommendations
    """
    assessment = _new_assessment()
    nomc = profile.get("nomc", {})

    if profile.get("regime") == "NOMC-consistent":
        assessment["strengths"].append("No evidence of biased model change at the test points")
    elif profile.get("regime") == "GOMC-only":
        assessment["areas_for_improvement"].append("Mean of M(x) differs from m(x) at some test points")
    else:
        assessment["areas_for_improvement"].append("Ensemble Lipschitz bound is not finite")

    delta = profile.get("delta", 0.0)
    if delta < 0.05:
        assessment["strengths"].append(f"Small expected L2 distance to m (delta={delta:.3g})")
    else:
        assessment["technical_notes"].append(f"Expected L2 distance to m is {delta:.3g}")

    if profile.get("nu", 0.0) < profile.get("nu_fallback", 0.5):
        assessment["strengths"].append(f"Tighter subgaussian parameter than the range bound (nu={profile['nu']:.3g})")
    else:
        assessment["technical_notes"].append("Subgaussian parameter falls back to the range bound 1/2")

    if nomc.get("low_power"):
        assessment["recommendations"].append("Use at least 10 ensemble members for meaningful NOMC statistics")
    if nomc.get("n_excluded"):
        assessment["technical_notes"].append(
            f"{nomc['n_excluded']} test point(s) excluded because member outputs were clamped"
        )

    t3 = profile.get("theorem3")
    if t3 is not None:
        if t3["violations"]:
            assessment["areas_for_improvement"].append(
                f"{t3['violations']} member(s) exceed the retraining L2 bound {t3['bound']:.4g}"
            )
        else:
            assessment["strengths"].append(
                f"Every member within the retraining L2 bound (max {t3['max_distance']:.3g} <= {t3['bound']:.3g})"
            )

    assessment["technical_notes"].append(get_regime_interpretation(profile.get("regime")))
    return _rate(assessment)


def get_rhat_interpretation(rhat, tau):
    """
    Get interpretation of a counterfactual's R-hat.

    Args:
        rhat: Relaxed stability measure
        tau: Test threshold

    Returns:
        String interpretation
    """
    if rhat >= tau + 0.1:
        return "Robust - comfortably above the threshold"
    elif rhat >= tau:
        return "Passes - close to the threshold"
    elif rhat >= 0.5:
        return "Fails - valid now but sensitive to local variation"
    else:
        return "Fails - the neighbourhood is mostly classified negative"


def assess_robustness(reports, cohorts=None):
    """
    Assess robustness-test results for a batch of counterfactuals.

    Args:
        reports: Stability report dicts (Rhat, tau, pass, optional validity)
        cohorts: Optional cohort_split dict

    Returns:
        Dict with assessment results and recommendations
    """
    assessment = _new_assessment()
    if not reports:
        assessment["areas_for_improvement"].append("No counterfactuals were scored")
        return _rate(assessment)

    passed = sum(1 for r in reports if r["pass"])
    share = passed / len(reports)
    if share >= 0.5:
        assessment["strengths"].append(f"{passed}/{len(reports)} counterfactuals pass the robustness test")
    elif passed:
        assessment["technical_notes"].append(f"Only {passed}/{len(reports)} counterfactuals pass the robustness test")
    else:
        assessment["areas_for_improvement"].append("No counterfactual passes the robustness test")
        assessment["recommendations"].append(
            "Ask for counterfactuals with a margin above 0.5 or lower tau"
        )

    if cohorts:
        hi, lo = cohorts["pass_validity"], cohorts["fail_validity"]
        if hi == hi and lo == lo:
            if hi > lo:
                assessment["strengths"].append(
                    f"Passing counterfactuals stay valid more often ({hi:.2f} vs {lo:.2f})"
                )
            else:
                assessment["areas_for_improvement"].append(
                    f"Passing counterfactuals are not more valid under model change ({hi:.2f} vs {lo:.2f})"
                )
        if min(cohorts["pass_size"], cohorts["fail_size"]) < 30:
            assessment["technical_notes"].append("A cohort has fewer than 30 counterfactuals")

    if all(r.get("R") is not None and r["Rhat"] >= r["R"] for r in reports):
        assessment["strengths"].append("R-hat dominates R on every shared sample set")

    return _rate(assessment)
