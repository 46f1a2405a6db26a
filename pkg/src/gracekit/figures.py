"""Figure rendering for the report paths.

Every figure writer takes already-computed report objects and a target
path; nothing here recomputes results. Uses the Agg backend so rendering
works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .oracle import FidelityReport
from .synth import DownstreamReport, SeparationReport


def save_separation_figure(reports: Sequence[SeparationReport],
                           strengths: Sequence[float], path: str | Path) -> None:
    """AUC and in-budget precision against planted alignment strength."""
    per_strength = len(reports) // len(strengths)
    aucs = np.array([r.auc for r in reports]).reshape(len(strengths), per_strength)
    precisions = np.array([r.precision_at_budget for r in reports]).reshape(
        len(strengths), per_strength)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, data, label in ((axes[0], aucs, "ranking AUC"),
                            (axes[1], precisions, "precision at budget")):
        mean = data.mean(axis=1)
        sd = data.std(axis=1, ddof=1) if per_strength > 1 else np.zeros(len(strengths))
        ax.errorbar(strengths, mean, yerr=sd, marker="o", capsize=3)
        ax.axhline(0.5, color="grey", linestyle=":", linewidth=1)
        ax.set_xlabel("alignment strength")
        ax.set_ylabel(label)
        ax.set_ylim(0.0, 1.05)
        ax.grid(alpha=0.3)
    fig.suptitle("Planted-class separation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_downstream_figure(report: DownstreamReport, path: str | Path) -> None:
    """Final target loss per selection method, mean with one-sd bars."""
    names = sorted(report.outcomes)
    means = [report.outcomes[n].mean_loss for n in names]
    sds = [report.outcomes[n].sd_loss for n in names]
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    positions = np.arange(len(names))
    ax.bar(positions, means, yerr=sds, capsize=4, color="#4878d0")
    ax.set_xticks(positions)
    ax.set_xticklabels(names)
    ax.set_ylabel("target loss after training")
    ax.set_title(f"Toy downstream comparison ({len(report.seeds)} seeds)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_fidelity_figure(report: FidelityReport, path: str | Path) -> None:
    """Distribution of per-trial rank agreement between proxy and exact scores."""
    spearmans = [r.spearman for r in report.rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.hist(spearmans, bins=np.linspace(-1.0, 1.0, 41), color="#4878d0")
    ax.axvline(report.median_spearman, color="crimson", linestyle="--",
               label=f"median = {report.median_spearman:.3f}")
    ax.set_xlabel("Spearman(proxy scores, exact scores)")
    ax.set_ylabel("trials")
    ax.set_title("Proxy fidelity under correlated inputs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
