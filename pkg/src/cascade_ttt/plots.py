"""Static figures rendered from report data (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_METADATA = {"Software": None}


def delta_histogram(deltas: Sequence[float], path, bins: int = 30) -> Path:
    """Histogram of per-cascade MSLE change; bars right of zero are degradations."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.hist(list(deltas), bins=bins, color="#4c72b0", edgecolor="white")
    ax.axvline(0.0, color="#c44e52", linewidth=1.0, linestyle="--")
    n = len(deltas)
    worse = sum(1 for d in deltas if d > 0)
    ax.set_xlabel("ΔMSLE (with TTT − without)")
    ax.set_ylabel("cascades")
    ax.set_title(f"degraded on {worse}/{n} cascades" if n else "no cascades")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    return path


def metric_curve(xs: Sequence[float], series: dict[str, Sequence[float]], path,
                 xlabel: str = "TTT steps", ylabel: str = "MSLE") -> Path:
    """One line per named series over a shared x axis (e.g. metric vs. adaptation steps)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name, ys in series.items():
        ax.plot(list(xs), list(ys), marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    return path
