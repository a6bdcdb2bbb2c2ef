"""Figures for tuning runs, written next to the CSV outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from graphprompt.tuning import Comparison, MetricCurve  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
})


def _stack(curves: list[MetricCurve], attr: str):
    epochs = [p.epoch for p in curves[0].points]
    vals = np.array([[getattr(p, attr) for p in c.points] for c in curves], dtype=float)
    return np.asarray(epochs), np.nanmean(vals, axis=0), np.nanstd(vals, axis=0)


def plot_curves(curves: dict[str, list[MetricCurve]], path, metric: str = "auc") -> Path:
    """Train loss, train metric and test metric per epoch; one line per strategy,
    shaded by one standard deviation across seeds."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    panels = [("train_loss", "train loss"), ("train_metric", f"train {metric}"),
              ("test_metric", f"test {metric}")]
    for name, runs in curves.items():
        for ax, (attr, label) in zip(axes, panels):
            x, mu, sd = _stack(runs, attr)
            line, = ax.plot(x, mu, label=name, lw=1.4)
            if len(runs) > 1:
                ax.fill_between(x, mu - sd, mu + sd, color=line.get_color(), alpha=0.15, lw=0)
            ax.set_xlabel("epoch")
            ax.set_ylabel(label)
    axes[-1].legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_comparison(result: Comparison, path) -> Path:
    names = [r.strategy for r in result.rows]
    means = [r.mean for r in result.rows]
    stds = [r.std for r in result.rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
    ax.bar(names, means, yerr=stds, capsize=3, color="0.6", edgecolor="0.2")
    for i, r in enumerate(result.rows):
        ax.annotate(f"{r.trainable_params:,}", (i, 0.02), ha="center", va="bottom",
                    fontsize=7, rotation=90, xycoords=("data", "axes fraction"))
    ax.set_ylabel(f"test {result.metric}")
    ax.set_ylim(0, 1.05 if result.metric in ("auc", "accuracy") else None)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def write_comparison_report(result: Comparison, csv_path) -> dict[str, Path]:
    """Comparison CSV plus per-run curve CSVs and two figures beside it.

    ``out.csv`` produces ``out_curves/<strategy>_seed<k>.csv``,
    ``out_curves.png`` and ``out_bars.png``.
    """
    csv_path = Path(csv_path)
    result.write_csv(csv_path)
    curve_dir = csv_path.with_name(csv_path.stem + "_curves")
    curve_dir.mkdir(parents=True, exist_ok=True)
    grouped = defaultdict(list)
    for (name, seed), curve in sorted(result.curves.items()):
        curve.write_csv(curve_dir / f"{name}_seed{seed}.csv")
        grouped[name].append(curve)
    return {
        "csv": csv_path,
        "curves": curve_dir,
        "curve_figure": plot_curves(dict(grouped), csv_path.with_name(csv_path.stem + "_curves.png"),
                                    result.metric),
        "bar_figure": plot_comparison(result, csv_path.with_name(csv_path.stem + "_bars.png")),
    }


def plot_single_curve(curve: MetricCurve, path, label: str = "run") -> Path:
    return plot_curves({label: [curve]}, path, curve.metric)
