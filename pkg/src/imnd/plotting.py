"""Orientation figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_NAMES = ("roll", "pitch", "yaw")

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
}


def orientation_figure(series, path, title="", extra=None):
    """Estimates (left column) and errors (right column) per Euler axis.

    ``series`` is the (N, 10) array from the evaluator; ``extra`` maps labels
    to further series of the same layout drawn for comparison (e.g. raw
    integration).
    """
    extra = extra or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 2, figsize=(7.0, 5.0), sharex=True)
        t = series[:, 0]
        for k, name in enumerate(AXIS_NAMES):
            ax_est, ax_err = axes[k]
            ax_est.plot(t, series[:, 4 + k], color="k", label="ground truth")
            ax_est.plot(t, series[:, 1 + k], color="C0", label="estimate")
            ax_err.plot(t, series[:, 7 + k], color="C0", label="estimate")
            for j, (label, s) in enumerate(sorted(extra.items())):
                ax_est.plot(s[:, 0], s[:, 1 + k], color=f"C{j + 1}", label=label, alpha=0.8)
                ax_err.plot(s[:, 0], s[:, 7 + k], color=f"C{j + 1}", label=label, alpha=0.8)
            ax_est.set_ylabel(f"{name} (deg)")
            ax_err.set_ylabel(f"{name} error (deg)")
        axes[-1, 0].set_xlabel("time (s)")
        axes[-1, 1].set_xlabel("time (s)")
        axes[0, 0].legend(loc="best", frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
    return path


def rmse_bar_figure(rows, path):
    """Grouped bars of per-axis RMSE for every (sequence, mode) row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(rows) + 2), 3.0))
        labels = [f"{r.domain_tag}\n{r.mode}" for r in rows]
        width = 0.27
        for k, name in enumerate(AXIS_NAMES):
            ax.bar([i + (k - 1) * width for i in range(len(rows))],
                   [getattr(r, f"rmse_{name}") for r in rows], width, label=name)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=0)
        ax.set_ylabel("RMSE (deg)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
    return path
