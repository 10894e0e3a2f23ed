"""Figure rendering for ``kexp report``.

Every panel is also written as an XY CSV next to the PNG, so the figures can
be regenerated with any other tool. PNGs carry no timestamp metadata and are
byte-stable across runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.0, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "kexp",
}

_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def scatter_panel(path, X, title="", reference=None, max_points=5000):
    """2-d scatter of samples (first two columns), optionally over reference points."""
    X = np.asarray(X, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if reference is not None:
            R = np.asarray(reference, dtype=float)[:max_points]
            ax.scatter(R[:, 0], R[:, 1], s=2, c="0.75", lw=0, label="data")
        if X.shape[1] == 1:
            ax.hist(X[:max_points, 0], bins=60, density=True, color="C0")
        else:
            ax.scatter(X[:max_points, 0], X[:max_points, 1], s=2, c="C0", lw=0, label="samples")
            ax.set_aspect("equal", adjustable="datalim")
        if reference is not None:
            ax.legend(loc="upper right", markerscale=4, frameon=False)
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def curve_panel(path, iterations, values, ylabel, title="", logy=False):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(iterations, values, "-o", ms=2, lw=1)
        if logy and np.all(np.asarray(values) > 0):
            ax.set_yscale("log")
        ax.set_xlabel("outer iteration")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def bar_panel(path, labels, means, stds, ylabel, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(labels) + 1.5), 3.0))
        pos = np.arange(len(labels))
        ax.bar(pos, means, yerr=stds, color="C0", capsize=3)
        ax.set_xticks(pos)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
