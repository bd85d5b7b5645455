"""Report rendering: markdown tables, CSV, and heatmap figures."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalharness import MetricReport, emit_report, report_markdown


def render_heatmap(report: MetricReport, path) -> None:
    """Corruption x severity matrix as a color-mapped figure."""
    families = sorted({f for f, _ in report.cells})
    sevs = sorted({s for _, s in report.cells})
    mat = np.full((len(families), len(sevs)), np.nan)
    for i, fam in enumerate(families):
        for j, sev in enumerate(sevs):
            if (fam, sev) in report.cells:
                mat[i, j] = report.cells[(fam, sev)]

    fig, ax = plt.subplots(figsize=(1.2 * len(sevs) + 3, 0.6 * len(families) + 2))
    im = ax.imshow(mat, cmap="viridis", vmin=0.0,
                   vmax=max(report.clean_value, np.nanmax(mat) if mat.size else 1.0))
    ax.set_xticks(range(len(sevs)), [f"s{s}" for s in sevs])
    ax.set_yticks(range(len(families)), families)
    for i in range(len(families)):
        for j in range(len(sevs)):
            if not np.isnan(mat[i, j]):
                ax.text(j, i, f"{mat[i, j]:.3f}", ha="center", va="center",
                        color="white", fontsize=8)
    title = f"regime {report.regime}  clean={report.clean_value:.4f}"
    if report.mra is not None:
        title += f"  mRA={report.mra:.4f}"
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=report.metric_name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_files(reports: list[MetricReport], out_dir,
                        run_id: str) -> list[str]:
    """Write CSV alongside a heatmap figure per regime; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for r in reports:
        csv_path = os.path.join(out_dir, f"{run_id}.{r.regime}.report.csv")
        emit_report([r], csv_path, "csv")
        written.append(csv_path)
        fig_path = os.path.join(out_dir, f"{run_id}.{r.regime}.heatmap.png")
        render_heatmap(r, fig_path)
        written.append(fig_path)
    return written
