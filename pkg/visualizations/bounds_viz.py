"""
Bound verification charts.
Empirical event frequencies with their Wilson intervals against the analytic bounds.
"""
import plotly.graph_objects as go
from plotly.subplots import make_subplots

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def _empty_figure(message, title, height=500):
    fig = go.Figure()
    fig.add_annotation(
        text=message,
        xref="paper", yref="paper",
        x=0.5, y=0.5, showarrow=False,
        font=dict(size=16)
    )
    fig.update_layout(title=title, height=height)
    return fig


def _series_label(theorem, k, ell):
    label = f"{theorem} k={int(k)}"
    if ell == ell:  # NaN for theorems without ell
        label += f" l={ell:g}"
    return label


def plot_bound_curves(frame):
    """
    Frequency and bound versus epsilon, one panel per theorem.

    Args:
        frame: bound-curves table (theorem, k, epsilon, ell, rhs, freq, ci_lo, ci_hi)

    Returns:
        Plotly figure
    """
    title = "Bound Verification: Empirical Frequency vs Analytic Bound"
    frame = frame[frame["freq"].notna()] if len(frame) else frame
    if len(frame) == 0:
        return _empty_figure("No verified grid points available", title)

    theorems = sorted(frame["theorem"].unique())
    fig = make_subplots(rows=1, cols=len(theorems), subplot_titles=theorems, shared_yaxes=True)

    for col, theorem in enumerate(theorems, start=1):
        part = frame[frame["theorem"] == theorem]
        groups = part.groupby(["k", part["ell"].fillna(-1.0)], sort=True)
        for i, ((k, ell), rows) in enumerate(groups):
            rows = rows.sort_values("epsilon")
            color = PALETTE[i % len(PALETTE)]
            label = _series_label(theorem, k, rows["ell"].iloc[0])
            fig.add_trace(go.Scatter(
                x=rows["epsilon"], y=rows["rhs"].clip(upper=1.0),
                mode="lines", name=f"{label} bound",
                line=dict(color=color, width=2, dash="dash")
            ), row=1, col=col)
            fig.add_trace(go.Scatter(
                x=rows["epsilon"], y=rows["freq"],
                mode="markers", name=f"{label} freq",
                marker=dict(color=color, size=8),
                error_y=dict(type="data", symmetric=False,
                             array=rows["ci_hi"] - rows["freq"],
                             arrayminus=rows["freq"] - rows["ci_lo"])
            ), row=1, col=col)
        fig.update_xaxes(title_text="epsilon", row=1, col=col)

    fig.update_yaxes(title_text="probability", type="log", row=1, col=1)
    fig.update_layout(title=title, height=500, hovermode="closest")
    return fig
