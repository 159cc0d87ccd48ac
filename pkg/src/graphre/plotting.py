"""Figures rendered next to the delimited reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from graphre.corpus import DOMAIN_TITLES, LABELS  # noqa: E402

RC = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "graphre",
}


def new_figure(width: float = 7.0, height: float = None, **kwargs):
    golden = (math.sqrt(5) - 1) / 2
    with plt.rc_context(RC):
        return plt.subplots(figsize=(width, height or width * golden), **kwargs)


def save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date stamps, so re-runs are byte-identical
    with plt.rc_context(RC):
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_results_table(table, path: Path) -> Path:
    """Heat map of Macro-F1 per row/domain, with a %Δ bar panel on the right."""
    rows = table.rows()
    labels = [f"{r['encoder']} / {r['fusion']}" for r in rows]
    grid = np.array([[r["scores"][d] for d in table.domains] + [r["average"]] for r in rows])
    deltas = np.array([0.0 if math.isnan(r["delta"]) else r["delta"] for r in rows])

    with plt.rc_context(RC):
        fig, (ax, bx) = new_figure(
            9.0, 0.35 * len(rows) + 1.5, ncols=2, gridspec_kw={"width_ratios": [4, 1]}, sharey=True
        )
        im = ax.imshow(grid, aspect="auto", cmap="viridis")
        ax.set_xticks(range(grid.shape[1]), [DOMAIN_TITLES.get(d, d) for d in table.domains] + ["Average"])
        ax.set_yticks(range(len(rows)), labels)
        hi = grid.max() if grid.size else 0.0
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=7, color="white" if v < 0.6 * hi else "black")
        fig.colorbar(im, ax=ax, fraction=0.03, pad=0.01, label="Macro-F1 (%)")
        colors = ["tab:green" if d > 0 else "tab:red" if d < 0 else "grey" for d in deltas]
        bx.barh(range(len(rows)), deltas, color=colors)
        bx.axvline(0, color="black", lw=0.6)
        bx.set_xlabel("%Δ vs none")
        ax.set_title("Macro-F1 by encoder, fusion and domain")
    return save(fig, path)


def plot_label_distribution(counts: Mapping[str, Mapping[str, int]], path: Path) -> Path:
    """Stacked per-label relation counts, one bar per domain."""
    domains = list(counts)
    with plt.rc_context(RC):
        fig, ax = new_figure(8.0, 4.0)
        bottom = np.zeros(len(domains))
        cmap = plt.get_cmap("tab20")
        for k, lab in enumerate(LABELS):
            vals = np.array([counts[d].get(lab, 0) for d in domains], dtype=float)
            ax.bar([DOMAIN_TITLES.get(d, d) for d in domains], vals, bottom=bottom, label=lab, color=cmap(k % 20))
            bottom += vals
        ax.set_ylabel("relations")
        ax.legend(ncol=3, fontsize=6, frameon=False, bbox_to_anchor=(1.0, 1.0), loc="upper left")
        ax.set_title("Relation label distribution")
    return save(fig, path)
