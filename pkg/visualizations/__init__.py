# Plotly renderers for the emitted plot-data tables
import logging

from visualizations.bounds_viz import plot_bound_curves
from visualizations.stability_viz import plot_validity_vs_tau
from visualizations.training_viz import plot_divergence_trace

logger = logging.getLogger(__name__)

RENDERERS = {
    "bound-curves": plot_bound_curves,
    "validity-vs-tau": plot_validity_vs_tau,
    "divergence-trace": plot_divergence_trace,
}


def render_figure(figure, frame, path):
    """Render a plot-data table to standalone HTML; returns the path."""
    fig = RENDERERS[figure](frame)
    fig.write_html(path, include_plotlyjs="cdn")
    logger.info("rendered %s to %s", figure, path)
    return path
