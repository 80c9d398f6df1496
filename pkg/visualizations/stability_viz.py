"""
Robustness-test charts: validity under model change of the cohorts selected by tau.
"""
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from visualizations.bounds_viz import _empty_figure


def plot_validity_vs_tau(frame):
    """
    Validity rate and cohort size of {Rhat >= tau} for each tau.

    Args:
        frame: validity-vs-tau table (tau, cohort_size, validity_rate)

    Returns:
        Plotly figure
    """
    title = "Validity Under Model Change vs Robustness Threshold"
    if len(frame) == 0:
        return _empty_figure("No stability results available", title)

    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(
        x=frame["tau"], y=frame["validity_rate"],
        mode="lines+markers", name="validity rate",
        line=dict(color="green", width=3)
    ), secondary_y=False)
    fig.add_trace(go.Bar(
        x=frame["tau"], y=frame["cohort_size"],
        name="cohort size", marker_color="lightgray", opacity=0.6
    ), secondary_y=True)

    fig.update_xaxes(title_text="tau")
    fig.update_yaxes(title_text="validity rate", range=[0, 1.05], secondary_y=False)
    fig.update_yaxes(title_text="counterfactuals passing", secondary_y=True)
    fig.update_layout(title=title, height=500, hovermode="x unified")
    return fig
