"""
Tests for the plotly renderers behind emit-plot-data --render.
"""
import numpy as np
import pandas as pd

from visualizations import render_figure
from visualizations.bounds_viz import plot_bound_curves
from visualizations.stability_viz import plot_validity_vs_tau
from visualizations.training_viz import plot_divergence_trace


def _bound_frame():
    return pd.DataFrame({
        "theorem": ["T1", "T1", "T2", "T2", "T2"],
        "k": [50, 50, 50, 50, 200],
        "epsilon": [0.1, 0.2, 0.1, 0.2, 0.1],
        "ell": [np.nan, np.nan, 1.0, 1.0, 1.0],
        "rhs": [0.9, 0.6, 1.6, 1.3, 0.9],
        "freq": [0.02, 0.0, 0.1, 0.05, np.nan],
        "ci_lo": [0.01, 0.0, 0.08, 0.03, np.nan],
        "ci_hi": [0.03, 0.001, 0.12, 0.07, np.nan],
    })


class TestBoundCurves:

    def test_one_bound_and_frequency_trace_per_series(self):
        fig = plot_bound_curves(_bound_frame())
        # skipped rows (NaN frequency) are dropped before grouping
        assert len(fig.data) == 4
        assert [t.name for t in fig.data] == ["T1 k=50 bound", "T1 k=50 freq", "T2 k=50 l=1 bound",
                                              "T2 k=50 l=1 freq"]
        assert max(fig.data[2].y) == 1.0

    def test_nothing_verified(self):
        frame = _bound_frame().iloc[4:]
        fig = plot_bound_curves(frame)
        assert len(fig.data) == 0
        assert fig.layout.annotations[0].text == "No verified grid points available"


class TestOtherFigures:

    def test_validity_vs_tau(self):
        frame = pd.DataFrame({"tau": [0.5, 0.7], "cohort_size": [40, 30], "validity_rate": [0.8, 0.95]})
        fig = plot_validity_vs_tau(frame)
        assert [t.type for t in fig.data] == ["scatter", "bar"]

    def test_divergence_trace(self):
        frame = pd.DataFrame({"member": [0, 0, 1, 1], "t": [0, 1, 0, 1], "delta_t": [0.0, 0.1, 0.0, 0.05],
                              "analytic_bound_prefix": [0.0, 0.15, 0.0, 0.15]})
        fig = plot_divergence_trace(frame)
        assert len(fig.data) == 3
        assert list(fig.data[-1].y) == [0.0, 0.15]

    def test_empty_divergence(self):
        frame = pd.DataFrame(columns=["member", "t", "delta_t", "analytic_bound_prefix"])
        assert len(plot_divergence_trace(frame).data) == 0

    def test_render_writes_html(self, tmp_path):
        frame = pd.DataFrame({"tau": [0.5], "cohort_size": [3], "validity_rate": [1.0]})
        path = render_figure("validity-vs-tau", frame, str(tmp_path / "v.html"))
        with open(path) as f:
            assert "<html>" in f.read()
