"""CSV-driven figures with byte-stable SVG output.

Every plotter takes (csv_path, out_path) and documents the columns it reads;
a missing column raises ValueError naming it.  SVG output pins the hash salt
and strips the date so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

matplotlib.rcParams["svg.hashsalt"] = "nofrost"

PLOT_KINDS = ("stats", "tradeoff", "metric-hist", "eps-sweep", "interp-compare")


def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise ValueError(f"plot input not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in required if c not in cols]
        if missing:
            raise ValueError(f"{path} is missing required column(s) {missing}; has {cols}")
        return list(reader)


def _save(fig, out_path):
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, metadata={"Date": None} if out_path.suffix == ".svg" else None)
    plt.close(fig)
    return out_path


def plot_stats(csv_path, out_path):
    """Scatter of running (mean, variance) per channel, colored by source label.

    Columns: label, layer, channel, mean, variance.
    """
    rows = _read_csv(csv_path, ["label", "layer", "channel", "mean", "variance"])
    by_label = defaultdict(lambda: ([], []))
    for r in rows:
        xs, ys = by_label[r["label"]]
        xs.append(float(r["mean"]))
        ys.append(float(r["variance"]))
    fig, ax = plt.subplots(figsize=(5, 4))
    for label in sorted(by_label):
        xs, ys = by_label[label]
        ax.scatter(xs, ys, s=18, alpha=0.75, label=label)
    ax.set_xlabel("running mean")
    ax.set_ylabel("running variance")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_tradeoff(csv_path, out_path):
    """Robust-vs-clean accuracy trade-off curves, one line per series.

    Columns: series, gamma, clean_acc, robust_acc.  Single-point series are
    drawn as star markers (reference models overlaid on a sweep).
    """
    rows = _read_csv(csv_path, ["series", "gamma", "clean_acc", "robust_acc"])
    by_series = defaultdict(list)
    for r in rows:
        g = r["gamma"].strip()
        by_series[r["series"]].append(
            (float(g) if g else None, float(r["clean_acc"]), float(r["robust_acc"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for series in sorted(by_series):
        pts = sorted(by_series[series], key=lambda p: (p[0] is None, p[0] or 0.0))
        cl = [p[1] for p in pts]
        ro = [p[2] for p in pts]
        if len(pts) == 1:
            ax.plot(cl, ro, "*", markersize=14, label=series)
        else:
            ax.plot(cl, ro, "o-", label=series)
            for g, c, r0 in pts:
                if g is not None:
                    ax.annotate(f"{g:g}", (c, r0), fontsize=7,
                                textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("clean accuracy (%)")
    ax.set_ylabel("robust accuracy (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_metric_hist(csv_path, out_path, bins=30):
    """Per-metric histograms overlaid across models.

    Columns: model, metric, value.
    """
    rows = _read_csv(csv_path, ["model", "metric", "value"])
    by_metric = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_metric[r["metric"]][r["model"]].append(float(r["value"]))
    metrics = sorted(by_metric)
    fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(4 * max(len(metrics), 1), 3.2))
    if len(metrics) <= 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        for model in sorted(by_metric[metric]):
            ax.hist(by_metric[metric][model], bins=bins, alpha=0.55, label=model)
        ax.set_title(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_eps_sweep(csv_path, out_path):
    """Robust accuracy vs attack radius, one line per method.

    Columns: method, eps, robust_acc (eps on the 0-255 pixel scale).
    """
    rows = _read_csv(csv_path, ["method", "eps", "robust_acc"])
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append((float(r["eps"]), float(r["robust_acc"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for method in sorted(by_method):
        pts = sorted(by_method[method])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=method)
    ax.set_xlabel("attack eps (/255)")
    ax.set_ylabel("robust accuracy (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_interp_compare(csv_path, out_path):
    """Trade-off curves comparing statistics-interpolation strategies.

    Columns: strategy, gamma, clean_acc, robust_acc.
    """
    rows = _read_csv(csv_path, ["strategy", "gamma", "clean_acc", "robust_acc"])
    by_strategy = defaultdict(list)
    for r in rows:
        by_strategy[r["strategy"]].append(
            (float(r["gamma"]), float(r["clean_acc"]), float(r["robust_acc"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for strategy in sorted(by_strategy):
        pts = sorted(by_strategy[strategy])
        ax.plot([p[1] for p in pts], [p[2] for p in pts], "o-", label=strategy)
    ax.set_xlabel("clean accuracy (%)")
    ax.set_ylabel("robust accuracy (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_by_kind(kind, csv_path, out_path):
    table = {"stats": plot_stats, "tradeoff": plot_tradeoff,
             "metric-hist": plot_metric_hist, "eps-sweep": plot_eps_sweep,
             "interp-compare": plot_interp_compare}
    if kind not in table:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    return table[kind](csv_path, out_path)
