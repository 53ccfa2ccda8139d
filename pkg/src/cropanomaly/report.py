"""Static SVG figures for an evaluation run.

Figures are written with a fixed hash salt and no date metadata so that
identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import AnomalyCategory, LabelSet, PrecisionCurve  # noqa: E402
from .pixel_features import IndexKind, to_db  # noqa: E402
from .zonal_stats import StatKind  # noqa: E402

__all__ = ["plot_category_bars", "plot_precision_curve", "plot_series_envelope", "render_figures", "save_svg"]

_RC = {"svg.hashsalt": "cropanomaly", "svg.fonttype": "path", "font.size": 9}


def save_svg(fig, path) -> None:
    with plt.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_precision_curve(curve: PrecisionCurve, auc: float | None = None, title: str = ""):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(curve.ratios * 100, curve.precision * 100, color="tab:blue", lw=1.5)
        ax.set_xlabel("outlier ratio (%)")
        ax.set_ylabel("precision (%)")
        ax.set_xlim(0, 50)
        ax.set_ylim(0, 102)
        ax.grid(alpha=0.3)
        label = title if auc is None else f"{title}  AUC={auc:.3f}".strip()
        ax.set_title(label)
        fig.tight_layout()
    return fig


def plot_category_bars(values: Mapping[str, float], ylabel: str, title: str = ""):
    cats = [c.value for c in AnomalyCategory if c.value in values]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.8))
        colors = ["tab:green" if AnomalyCategory(c).tp_flag else "tab:red" for c in cats]
        ax.bar(range(len(cats)), [values[c] for c in cats], color=colors)
        ax.set_xticks(range(len(cats)))
        ax.set_xticklabels([c.lower().replace("_", " ") for c in cats], rotation=60, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 100)
        ax.set_title(title)
        fig.tight_layout()
    return fig


def plot_series_envelope(series, detected: Sequence[str], kind: IndexKind, stat: StatKind = StatKind.MEDIAN,
                         max_lines: int = 20, title: str = ""):
    """10th-90th percentile band over all parcels with detected parcels drawn on top.

    SAR backscatter is shown in dB.
    """
    by_id = {ts.parcel_id: ts for ts in series}
    dates = sorted({k[0] for ts in series for k in ts.entries if k[1] is kind and k[2] is stat})
    rows = np.array([[ts.entries.get((d, kind, stat), np.nan) for d in dates] for ts in series])
    if kind.sensor == "S1":
        rows = to_db(rows)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if rows.size:
            x = np.arange(len(dates))
            lo, mid, hi = np.nanpercentile(rows, [10, 50, 90], axis=0)
            ax.fill_between(x, lo, hi, color="0.8", label="10-90th percentile")
            ax.plot(x, mid, color="0.3", lw=1.2, label="median parcel")
            for pid in list(detected)[:max_lines]:
                if pid in by_id:
                    v = np.array([by_id[pid].entries.get((d, kind, stat), np.nan) for d in dates])
                    ax.plot(x, to_db(v) if kind.sensor == "S1" else v, lw=0.7, alpha=0.7)
            step = max(1, len(dates) // 8)
            ax.set_xticks(x[::step])
            ax.set_xticklabels([d.isoformat() for d in dates[::step]], rotation=45, ha="right")
            ax.legend(loc="best", fontsize=7)
        ax.set_ylabel(f"{kind.value} {stat.value.lower()}" + (" (dB)" if kind.sensor == "S1" else ""))
        ax.set_title(title)
        fig.tight_layout()
    return fig


def render_figures(out_dir, curve: PrecisionCurve, evaluation: Mapping, series, detections: Mapping[float, list],
                   labels: LabelSet, title: str = "") -> list[str]:
    """Write the standard figure set; returns the file names."""
    out_dir = Path(out_dir)
    written = []
    save_svg(plot_precision_curve(curve, evaluation.get("auc"), title), out_dir / "precision_curve.svg")
    written.append("precision_curve.svg")
    for ratio, block in evaluation.get("per_ratio", {}).items():
        name = f"histogram_r{ratio}.svg"
        save_svg(plot_category_bars(block["histogram"], "% of detected parcels", f"{title} ratio {ratio}"),
                 out_dir / name)
        written.append(name)
        name = f"recall_r{ratio}.svg"
        save_svg(plot_category_bars(block["recall"], "% of category detected", f"{title} ratio {ratio}"),
                 out_dir / name)
        written.append(name)
    first = next(iter(detections.values()), [])
    kinds = {k[1] for ts in series[:1] for k in ts.entries}
    for kind in (IndexKind.NDVI, IndexKind.GAMMA0_VH):
        if kind in kinds:
            name = f"series_{kind.value}.svg"
            save_svg(plot_series_envelope(series, first, kind, title=f"{title} detected parcels"), out_dir / name)
            written.append(name)
    return written
