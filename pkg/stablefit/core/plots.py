"""
SVG rendering for reports.

Uses matplotlib's Agg backend. Output is byte-deterministic: the SVG id
salt is fixed and the date metadata is omitted.
"""

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_RC = {"svg.hashsalt": "stablefit", "svg.fonttype": "path", "font.size": 9}
CONTOUR_LEVELS = 20


def _save(fig: "plt.Figure", path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def boxplot_svg(path: Union[str, Path], series: Mapping[str, Sequence[float]], title: str,
                ylabel: str, baseline: Optional[float] = None) -> Path:
    """One box per series with the raw points overlaid."""
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(series) + 2.0), 4.0))
        labels = list(series)
        data = [np.asarray(series[k], dtype=np.float64) for k in labels]
        ax.boxplot(data, showfliers=False)
        for i, values in enumerate(data, start=1):
            ax.scatter(np.full(len(values), i), values, s=10, alpha=0.6, color="tab:blue", zorder=3)
        if baseline is not None:
            ax.axhline(baseline, linestyle="--", color="tab:red", linewidth=1, label="majority baseline")
            ax.legend(loc="lower right")
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)


def line_svg(path: Union[str, Path], series: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
             title: str, xlabel: str, ylabel: str, logy: bool = False) -> Path:
    """Line plot of named (x, y) series."""
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, (x, y) in series.items():
            ax.plot(x, y, label=label, linewidth=1.2)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
    return _save(fig, path)


def band_svg(path: Union[str, Path], bands: Mapping[str, Tuple[Sequence[float], Sequence[float], Sequence[float]]],
             title: str, xlabel: str, ylabel: str) -> Path:
    """Mean lines with a +/- 1 std band for each named (x, mean, std) triple."""
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, (x, mean, std) in bands.items():
            x, mean, std = (np.asarray(v, dtype=np.float64) for v in (x, mean, std))
            ax.plot(x, mean, label=label, linewidth=1.2)
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if bands:
            ax.legend(fontsize=7)
        fig.tight_layout()
    return _save(fig, path)


def contour_svg(path: Union[str, Path], a_values: Sequence[float], b_values: Sequence[float],
                values: np.ndarray, title: str, markers: Optional[Dict[str, Tuple[float, float]]] = None,
                levels: int = CONTOUR_LEVELS) -> Path:
    """Filled contour of values[i, j] at (a_values[i], b_values[j]); NaN entries are left blank."""
    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(5.0, 4.2))
        grid = np.ma.masked_invalid(np.asarray(values, dtype=np.float64))
        filled = ax.contourf(np.asarray(a_values), np.asarray(b_values), grid.T, levels=levels, cmap="viridis")
        fig.colorbar(filled, ax=ax)
        for label, (a, b) in (markers or {}).items():
            ax.plot([a], [b], marker="o", color="white", markeredgecolor="black")
            ax.annotate(label, (a, b), textcoords="offset points", xytext=(4, 4), color="white")
        ax.set_xlabel("a (towards failed)")
        ax.set_ylabel("b (towards successful)")
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)
