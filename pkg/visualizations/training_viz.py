"""
Retraining divergence chart.
"""
import plotly.graph_objects as go

from visualizations.bounds_viz import _empty_figure

MAX_MEMBERS_SHOWN = 20


def plot_divergence_trace(frame):
    """
    Parameter divergence delta_t of each perturbed run and the analytic prefix bound.

    Args:
        frame: divergence-trace table (member, t, delta_t, analytic_bound_prefix)

    Returns:
        Plotly figure
    """
    title = "Parameter Divergence During Retraining"
    if len(frame) == 0:
        return _empty_figure("No divergence trace available (retrain-perturbed ensembles only)", title)

    fig = go.Figure()
    for member in sorted(frame["member"].unique())[:MAX_MEMBERS_SHOWN]:
        rows = frame[frame["member"] == member].sort_values("t")
        fig.add_trace(go.Scatter(
            x=rows["t"], y=rows["delta_t"],
            mode="lines", name=f"member {int(member)}",
            line=dict(width=1), opacity=0.6
        ))

    # the prefix bound depends only on the step sizes and positions, shared by all members
    first = frame[frame["member"] == frame["member"].min()].sort_values("t")
    fig.add_trace(go.Scatter(
        x=first["t"], y=first["analytic_bound_prefix"],
        mode="lines", name="2L * sum eta (differing steps)",
        line=dict(color="red", width=3, dash="dash")
    ))

    fig.update_layout(
        title=title,
        xaxis_title="step t",
        yaxis_title="||theta_t - theta'_t||",
        height=500,
        hovermode="x unified"
    )
    return fig
