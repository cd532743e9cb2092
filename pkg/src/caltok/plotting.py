"""PNG figures written next to the CSV/JSON outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

LOSS_TERMS = ("total", "ray", "depth", "rot", "trans")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curve(curve: Sequence[dict], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [r["iteration"] for r in curve]
    for term in LOSS_TERMS:
        if curve and term in curve[0]:
            ax.plot(its, [r[term] for r in curve], label=term, lw=1.0 if term != "total" else 1.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_report_bars(groups: Mapping[str, MetricReport], path,
                     metrics: Sequence[str] = ("Rel", "CD", "hErr", "RRA")) -> Path:
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.6))
    names = list(groups)
    for ax, m in zip(axes, metrics):
        ax.barh(range(len(names)), [getattr(groups[n], m) for n in names])
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names if ax is axes[0] else [], fontsize=6)
        ax.set_title(m)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], variable: str, path,
               metrics: Sequence[str] = ("Rel", "CD", "hErr")) -> Path:
    """``rows`` hold the swept value under ``variable`` plus one key per metric and a ``series`` label."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.4 * len(metrics), 3.2))
    series: dict[str, list[dict]] = {}
    for r in rows:
        series.setdefault(str(r.get("series", "")), []).append(r)
    for ax, m in zip(axes, metrics):
        for label, rs in series.items():
            rs = sorted(rs, key=lambda r: float(r[variable]))
            ax.plot([float(r[variable]) for r in rs], [float(r[m]) for r in rs], marker="o", label=label or None)
        ax.set_xlabel(variable)
        ax.set_title(m)
    if any(series):
        axes[0].legend(fontsize=7)
    return _save(fig, path)
