"""Matplotlib rendering on top of the data-side aggregation.

Rendering is read-only over run directories; each function writes one PNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import data


@dataclass
class PlotJob:
    run_dirs: list
    metric: str = "episode_return"
    smoothing: int = 1
    out_path: str = "plot.png"
    step_range: tuple | None = None
    source: str = "gradnorms"  # for bar charts: gradnorms | metrics
    title: str = ""

    def __post_init__(self):
        if not self.run_dirs:
            raise ValueError("PlotJob needs at least one run directory")


def render_learning_curve(job: PlotJob) -> str:
    band = data.metric_band(job.run_dirs, job.metric, job.smoothing)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(band.steps, band.mean, lw=1.6, label=f"mean over {band.n_runs} run(s)")
    ax.fill_between(band.steps, band.lo, band.hi, alpha=0.25, lw=0, label="95% CI")
    ax.set_xlabel("environment step")
    ax.set_ylabel(job.metric)
    ax.set_title(job.title or job.metric)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(job.out_path, dpi=130)
    plt.close(fig)
    return job.out_path


def render_gradnorm_bars(job: PlotJob) -> str:
    if job.source == "metrics":
        ks, means = data.gradnorm_bars_from_metrics(job.run_dirs, job.step_range)
    else:
        ks, means = data.gradnorm_bars(job.run_dirs, job.step_range)
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.bar([str(k) for k in ks], means, color="#4878cf")
    ax.set_xlabel("sampling step k")
    ax.set_ylabel("average gradient norm")
    ax.set_title(job.title or "gradient norm per sampling step")
    fig.tight_layout()
    fig.savefig(job.out_path, dpi=130)
    plt.close(fig)
    return job.out_path


def render_plots(job: PlotJob, kind: str = "curve") -> str:
    if kind == "curve":
        return render_learning_curve(job)
    if kind == "bars":
        return render_gradnorm_bars(job)
    raise ValueError(f"unknown plot kind {kind!r}")
