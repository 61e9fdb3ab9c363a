"""Optional standalone HTML figures. CSV outputs remain the primary plot data."""
import logging
import os
from typing import List, Optional, Sequence

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from models.schemas import AblationRow, KdeRateResult, SpectrumReport

# Set up logger
logger = logging.getLogger(__name__)


def _write(fig: go.Figure, path: str) -> Optional[str]:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.write_html(path, include_plotlyjs="cdn", full_html=True)
        logger.info(f"Wrote figure {path}")
        return path
    except Exception as e:
        logger.error(f"Failed to write figure {path}: {str(e)}")
        return None


def spectrum_figure(reports: Sequence[SpectrumReport], path: str) -> Optional[str]:
    fig = make_subplots(rows=1, cols=2, subplot_titles=("Singular values", "Cumulative variance"))
    for report in reports:
        name = f"{report.label or 'batch'} t={report.t:.2f}" if report.t is not None else (report.label or "batch")
        idx = np.arange(1, len(report.singular_values) + 1)
        fig.add_trace(go.Scatter(x=idx, y=report.singular_values, mode="lines", name=name), row=1, col=1)
        fig.add_trace(go.Scatter(x=idx, y=report.cumulative_variance, mode="lines", name=name, showlegend=False),
                      row=1, col=2)
    if reports:
        fig.add_hline(y=reports[0].threshold, line_dash="dash", row=1, col=2)
    fig.update_yaxes(type="log", row=1, col=1)
    fig.update_layout(title="Latent spectrum along the flow")
    return _write(fig, path)


def kde_rate_figure(results: Sequence[KdeRateResult], path: str) -> Optional[str]:
    fig = go.Figure()
    for result in results:
        n = np.asarray(result.n_grid, dtype=float)
        fig.add_trace(go.Scatter(x=n, y=result.mise, mode="markers+lines",
                                 name=f"r={result.r} slope {result.slope:.3f}"))
        # Reference line with the target slope through the first point.
        ref = result.mise[0] * (n / n[0]) ** result.target
        fig.add_trace(go.Scatter(x=n, y=ref, mode="lines", line_dash="dot",
                                 name=f"r={result.r} target {result.target:.3f}"))
    fig.update_xaxes(type="log", title="N")
    fig.update_yaxes(type="log", title="MISE")
    fig.update_layout(title="KDE convergence rate")
    return _write(fig, path)


def ablation_figure(rows: List[AblationRow], path: str) -> Optional[str]:
    settings = [row.setting for row in rows]
    fig = make_subplots(rows=1, cols=2, subplot_titles=("DS", "LFD"))
    fig.add_trace(go.Bar(x=settings, y=[r.ds_mean for r in rows],
                         error_y=dict(type="data", array=[r.ds_std for r in rows]), name="DS"), row=1, col=1)
    fig.add_trace(go.Bar(x=settings, y=[r.lfd_mean for r in rows],
                         error_y=dict(type="data", array=[r.lfd_std for r in rows]), name="LFD"), row=1, col=2)
    axis = rows[0].axis.value if rows else ""
    fig.update_layout(title=f"Ablation: {axis}", showlegend=False)
    return _write(fig, path)
