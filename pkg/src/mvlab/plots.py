"""Standalone SVG log-log plots of error curves."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# text as paths keeps the SVG free of font dependencies
plt.rcParams["svg.fonttype"] = "path"
plt.rcParams["svg.hashsalt"] = "mvlab"


def loglog_svg(series, xlabel: str, ylabel: str, title: str = "") -> bytes:
    """Render [(label, xs, ys, fit or None), ...] to SVG bytes.

    ``fit`` is a RateFit; its line is drawn and the slope annotated.
    """
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for label, xs, ys, fit in series:
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        line = ax.loglog(xs, ys, "o-", label=label)[0]
        if fit is not None:
            grid = np.geomspace(xs.min(), xs.max(), 32)
            ax.loglog(
                grid,
                np.exp(fit.intercept) * grid**fit.slope,
                "--",
                color=line.get_color(),
                label=f"fit slope {fit.slope:.3f} (R² {fit.r_squared:.3f})",
            )
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()
