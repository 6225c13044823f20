"""Line charts written as SVG files with stable, diff-friendly output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "selfalign",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def line_chart(series: dict[str, tuple[list, list]], path, title: str = "", xlabel: str = "", ylabel: str = "",
               markers: bool = True):
    """Plot ``{label: (xs, ys)}`` and save to ``path``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, marker="o" if markers else None, markersize=3, linewidth=1.2, label=label)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
