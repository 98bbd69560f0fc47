"""Figures for evaluation reports (written next to report.json / report.txt)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import HIGHLIGHT_METRICS, SUMMARY_METRICS, MetricsReport  # noqa: E402
from .prompting import RISK_LEVELS  # noqa: E402

_LABELS = {
    "recall": "Recall",
    "precision": "Precision",
    "weighted_recall": "Weighted recall",
    "harmonic_mean": "Harmonic mean",
    "consistency": "Consistency",
    "contradiction": "Contradiction",
}
_COLORS = {"low": "#4c72b0", "moderate": "#dd8452", "high": "#c44e52", "overall": "#7f7f7f"}


def report_figure(report: MetricsReport, metrics: tuple[str, ...], title: str, width: float = 8):
    """Grouped bars: one group per metric, one bar per risk level plus overall.

    Absent risk levels are left as gaps rather than drawn at zero.
    """
    groups = list(RISK_LEVELS) + ["overall"]
    fig, ax = plt.subplots(figsize=(width, width * 0.5))
    x = np.arange(len(metrics))
    bar = 0.8 / len(groups)
    for i, group in enumerate(groups):
        values = report.overall if group == "overall" else report.per_risk.get(group)
        heights = [np.nan if values is None or values.get(m) is None else values[m] for m in metrics]
        ax.bar(x + (i - (len(groups) - 1) / 2) * bar, heights, bar, label=group, color=_COLORS[group])
    ax.set_xticks(x)
    ax.set_xticklabels([_LABELS[m] for m in metrics])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Score")
    ax.set_title(title)
    ax.legend(frameon=False, ncol=len(groups), loc="upper center", bbox_to_anchor=(0.5, -0.1))
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    fig.tight_layout()
    return fig


def write_report_figures(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, metrics, title in (
        ("highlights_by_risk.png", HIGHLIGHT_METRICS, "Highlight metrics by risk level"),
        ("summaries_by_risk.png", SUMMARY_METRICS, "Summary metrics by risk level"),
    ):
        fig = report_figure(report, metrics, title)
        path = out / name
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
