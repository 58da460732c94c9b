"""SVG figures with stable bytes across runs (fixed hash salt, no timestamp)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "ctriage", "svg.fonttype": "none", "figure.figsize": (4.5, 4.0)}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_roc(curve, path, band=None, fpr_grid=None, title="ROC"):
    """ROC curve, optionally with a bootstrap TPR ribbon on ``fpr_grid``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if band is not None:
            ax.fill_between(fpr_grid, band[0], band[1], color="tab:blue", alpha=0.2,
                            linewidth=0, label="95% CI")
        ax.plot(curve.fpr, curve.tpr, color="tab:blue", label=f"AUC {curve.auc:.3f}")
        ax.plot([0, 1], [0, 1], color="grey", linestyle=":", linewidth=0.8)
        ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate",
               ylabel="true positive rate", title=title)
        ax.legend(loc="lower right", fontsize=8)
        _save(fig, path)


def plot_risk_coverage(points, path, band=None, operating=None, literary=None,
                       title="Risk-coverage"):
    """Miss rate among reported studies against coverage.

    ``band`` holds per-point (lo, hi) arrays aligned with ``points``;
    ``operating`` maps a label to ``(coverage, csmr)``; ``literary`` draws a
    horizontal reference rate.
    """
    keep = [i for i, p in enumerate(points) if p.csmr is not None]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if keep:
            cov = np.array([points[i].coverage for i in keep])
            risk = np.array([points[i].csmr for i in keep])
            order = np.argsort(cov, kind="mergesort")
            if band is not None:
                lo, hi = (np.asarray(b)[keep][order] for b in band)
                ax.fill_between(cov[order], 100 * lo, 100 * hi, step="post", color="tab:blue",
                                alpha=0.2, linewidth=0, label="95% CI")
            ax.step(cov[order], 100 * risk[order], where="post", color="tab:blue")
        for label, (c, r) in (operating or {}).items():
            if r is not None:
                ax.plot([c], [100 * r], "o", color="tab:red")
                ax.annotate(label, (c, 100 * r), fontsize=7, xytext=(4, 4),
                            textcoords="offset points")
        if literary is not None:
            ax.axhline(100 * literary, color="grey", linestyle="--", linewidth=0.8,
                       label=f"reader baseline {100 * literary:.2f}%")
            ax.legend(loc="upper left", fontsize=8)
        ax.set(xlim=(0, 1), xlabel="coverage (fraction reported)",
               ylabel="significant miss rate (%)", title=title)
        _save(fig, path)
