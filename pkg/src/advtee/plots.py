"""Static figures derived from a loss-history CSV and a metrics report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoFailure  # noqa: E402
from .evaluation import METRIC_TITLES, MetricsReport, _label  # noqa: E402
from .training import read_history_csv  # noqa: E402


def plot_loss_curve(history: list, path, column: str = "total") -> dict:
    """Plot one loss column against iteration. A single row yields a single marker."""
    its = np.array([r["iteration"] for r in history], dtype=float)
    vals = np.array([r[column] for r in history], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(its, vals, marker="o" if len(vals) == 1 else None, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"{column} loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return {"iteration": its.tolist(), column: vals.tolist()}


def plot_ap_bars(report: MetricsReport, path, metric: str = "ap_50") -> dict:
    """Grouped bars: one group per detector, one bar per condition."""
    dets, conds = report.detectors, report.conditions
    groups = {d: [report.rows[d].get(c, {}).get(metric, np.nan) for c in conds] for d in dets}
    width = 0.8 / max(len(conds), 1)
    x = np.arange(len(dets))
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(dets) + 2), 4))
    for j, c in enumerate(conds):
        ax.bar(x + (j - (len(conds) - 1) / 2) * width, [groups[d][j] for d in dets], width, label=_label(c))
    ax.set_xticks(x)
    ax.set_xticklabels(dets)
    ax.set_ylim(0, 1)
    ax.set_ylabel(METRIC_TITLES[metric])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return {"detectors": dets, "conditions": conds, "values": groups}


def emit_plots(loss_history_csv, report_json, out_dir) -> dict:
    """Write ``loss_curve.png`` and ``ap_comparison.png`` under ``out_dir``.

    Returns the written paths and the data that went into each figure.
    Either input may be None to skip its figure.
    """
    out_dir = Path(out_dir)
    result = {"paths": {}, "data": {}}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if loss_history_csv is not None:
            history = read_history_csv(loss_history_csv)
            if not history:
                raise IoFailure(f"{loss_history_csv} has no rows")
            path = out_dir / "loss_curve.png"
            result["data"]["loss_curve"] = plot_loss_curve(history, path)
            result["paths"]["loss_curve"] = path
        if report_json is not None:
            report = MetricsReport.load(report_json)
            path = out_dir / "ap_comparison.png"
            result["data"]["ap_comparison"] = plot_ap_bars(report, path)
            result["paths"]["ap_comparison"] = path
    except IoFailure:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise IoFailure(f"cannot emit plots: {exc}") from exc
    return result
