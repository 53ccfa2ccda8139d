"""Parcel-level robust statistics of pixel features, and parcel filtering."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geo_raster import PixelSet, require_aligned
from .pixel_features import FeatureGrid, IndexKind

__all__ = [
    "StatKind",
    "ParcelTimeSeries",
    "FilterDecision",
    "FilterReport",
    "DEFAULT_MIN_PIXELS",
    "DEFAULT_MIN_AREA_HA",
    "filter_parcels",
    "percentile",
    "read_series_csv",
    "row_statistics",
    "summarize_dataset",
    "summarize_parcel_date",
    "write_series_csv",
    "zonal_statistic",
]

DEFAULT_MIN_PIXELS = 3
DEFAULT_MIN_AREA_HA = 0.5


class StatKind(str, enum.Enum):
    MEDIAN = "MEDIAN"
    IQR = "IQR"
    SKEWNESS = "SKEWNESS"
    KURTOSIS = "KURTOSIS"

    @property
    def order(self) -> int:
        return _STAT_ORDER[self]


_STAT_ORDER = {s: i for i, s in enumerate(StatKind)}


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics at position (n-1)*q."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    h = (v.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def _sorted_percentile(sorted_rows: np.ndarray, counts: np.ndarray, q: float) -> np.ndarray:
    # rows sorted ascending with NaN padding at the end; counts >= 1
    h = (counts - 1) * q
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, counts - 1)
    ar = np.arange(sorted_rows.shape[0])
    v_lo = sorted_rows[ar, lo]
    v_hi = sorted_rows[ar, hi]
    return v_lo + (h - lo) * (v_hi - v_lo)


def row_statistics(values: np.ndarray, stats: Iterable[StatKind], min_count: int = 1) -> dict[StatKind, np.ndarray]:
    """Statistics of each row of ``values``, ignoring NaN entries.

    Rows with fewer than ``min_count`` finite values, and zero-variance rows
    for the moment statistics, come back as NaN.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    stats = [StatKind(s) for s in stats]
    finite = ~np.isnan(values)
    counts = finite.sum(axis=1)
    ok = counts >= max(min_count, 1)
    out: dict[StatKind, np.ndarray] = {}
    n = values.shape[0]
    safe_counts = np.where(ok, counts, 1)
    if any(s in (StatKind.MEDIAN, StatKind.IQR) for s in stats):
        srt = np.sort(values, axis=1)
        srt[~ok, 0] = 0.0
        if StatKind.MEDIAN in stats:
            out[StatKind.MEDIAN] = np.where(ok, _sorted_percentile(srt, safe_counts, 0.5), np.nan)
        if StatKind.IQR in stats:
            iqr = _sorted_percentile(srt, safe_counts, 0.75) - _sorted_percentile(srt, safe_counts, 0.25)
            out[StatKind.IQR] = np.where(ok, iqr, np.nan)
    if any(s in (StatKind.SKEWNESS, StatKind.KURTOSIS) for s in stats):
        filled = np.where(finite, values, 0.0)
        mean = filled.sum(axis=1) / safe_counts
        dev = np.where(finite, values - mean[:, None], 0.0)
        # work in units of the row's largest magnitude so that neither m2 nor
        # its powers leave the normal float range
        scale = np.abs(np.where(finite, values, 0.0)).max(axis=1) if n else np.zeros(0)
        dev = dev / np.where(scale > 0, scale, 1.0)[:, None]
        m2 = (dev**2).sum(axis=1) / safe_counts
        # spread below 1e-12 of the magnitude counts as zero variance
        good = ok & (m2 > 1e-24)
        z = dev / np.sqrt(np.where(good, m2, 1.0))[:, None]
        if StatKind.SKEWNESS in stats:
            out[StatKind.SKEWNESS] = np.where(good, (z**3).sum(axis=1) / safe_counts, np.nan)
        if StatKind.KURTOSIS in stats:
            out[StatKind.KURTOSIS] = np.where(good, (z**4).sum(axis=1) / safe_counts - 3.0, np.nan)
    return out


def zonal_statistic(values, stat: StatKind) -> float:
    """One statistic of a non-empty multiset.

    Skewness and kurtosis (excess) return NaN for zero-variance input.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("zonal statistic of an empty set")
    stat = StatKind(stat)
    if stat is StatKind.MEDIAN:
        return percentile(v, 0.5)
    if stat is StatKind.IQR:
        return percentile(v, 0.75) - percentile(v, 0.25)
    return float(row_statistics(v[None, :], [stat])[stat][0])


@dataclass
class ParcelTimeSeries:
    """Per-parcel entries keyed by ``(date, IndexKind, StatKind)``.

    Absent keys are missing values.  ``clear_pixels`` maps
    ``(date, sensor)`` to the number of usable pixels at that date.
    """

    parcel_id: str
    crop_type: str = ""
    entries: dict = field(default_factory=dict)
    clear_pixels: dict = field(default_factory=dict)
    n_missing: int = 0

    def get(self, when: date, kind: IndexKind, stat: StatKind) -> float | None:
        return self.entries.get((when, IndexKind(kind), StatKind(stat)))

    def series(self, kind: IndexKind, stat: StatKind) -> tuple[list[date], np.ndarray]:
        kind, stat = IndexKind(kind), StatKind(stat)
        keys = sorted(k for k in self.entries if k[1] is kind and k[2] is stat)
        return [k[0] for k in keys], np.array([self.entries[k] for k in keys])


def summarize_parcel_date(
    pixels: PixelSet,
    feature: FeatureGrid,
    stats: Iterable[StatKind],
    min_pixels: int = DEFAULT_MIN_PIXELS,
) -> tuple[dict, int]:
    """Statistics of one feature over one parcel's usable pixels.

    Multispectral features use the pixels flagged clear at the feature's
    date; SAR features (never cloud-masked) use every buffered pixel.
    Returns ``(entries, n_used)``; ``entries`` is empty when fewer than
    ``min_pixels`` usable pixels remain.
    """
    require_aligned(pixels.meta, feature.meta)
    if feature.kind.sensor == "S2":
        mask = pixels.clear.get(feature.date, pixels.survived)
    else:
        mask = pixels.survived
    vals = feature.values[pixels.rows[mask], pixels.cols[mask]]
    vals = vals[~np.isnan(vals)]
    if vals.size < min_pixels:
        return {}, int(vals.size)
    res = row_statistics(vals[None, :], stats)
    entries = {}
    for s, arr in res.items():
        if not np.isnan(arr[0]):
            entries[(feature.date, feature.kind, s)] = float(arr[0])
    return entries, int(vals.size)


def _padded_index(flat_lists: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(f) for f in flat_lists), default=0)
    idx = np.zeros((len(flat_lists), max(width, 1)), dtype=np.int64)
    valid = np.zeros(idx.shape, dtype=bool)
    for i, f in enumerate(flat_lists):
        idx[i, : len(f)] = f
        valid[i, : len(f)] = True
    return idx, valid


def summarize_dataset(
    pixel_sets: Sequence[PixelSet],
    features: Iterable[FeatureGrid],
    stats_by_sensor: Mapping[str, Iterable[StatKind]],
    min_pixels: int = DEFAULT_MIN_PIXELS,
    crop_types: Mapping[str, str] | None = None,
) -> list[ParcelTimeSeries]:
    """Batched equivalent of calling :func:`summarize_parcel_date` for every
    parcel and feature grid."""
    crop_types = crop_types or {}
    stats_by_sensor = {k: [StatKind(s) for s in v] for k, v in stats_by_sensor.items()}
    out = [ParcelTimeSeries(p.parcel_id, crop_types.get(p.parcel_id, "")) for p in pixel_sets]
    cache: dict = {}

    def index_for(sensor: str, when: date):
        key = ("S1", None) if sensor == "S1" else ("S2", when)
        if key not in cache:
            masks = [
                p.survived if sensor == "S1" else p.clear.get(when, p.survived) for p in pixel_sets
            ]
            cache[key] = _padded_index([p.flat_index(m) for p, m in zip(pixel_sets, masks)])
        return cache[key]

    for feat in features:
        sensor = feat.kind.sensor
        stats = stats_by_sensor.get(sensor, [])
        if not stats or not pixel_sets:
            continue
        require_aligned(pixel_sets[0].meta, feat.meta)
        idx, valid = index_for(sensor, feat.date)
        vals = feat.values.ravel()[idx]
        vals[~valid] = np.nan
        counts = (~np.isnan(vals)).sum(axis=1)
        res = row_statistics(vals, stats, min_count=min_pixels)
        for i, ts in enumerate(out):
            ts.clear_pixels[(feat.date, feat.kind)] = int(counts[i])
            for s in stats:
                v = res[s][i]
                if np.isnan(v):
                    ts.n_missing += 1
                else:
                    ts.entries[(feat.date, feat.kind, s)] = float(v)
    return out


# --------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterDecision:
    kept: bool
    reason: str | None = None
    date: date | None = None

    def __str__(self):
        if self.kept:
            return "kept"
        if self.date is not None:
            return f"discarded({self.reason}:{self.date.isoformat()})"
        return f"discarded({self.reason})"


class FilterReport(dict):
    """parcel id -> :class:`FilterDecision`, one entry per input parcel."""

    @property
    def kept_ids(self) -> list[str]:
        return [pid for pid, d in self.items() if d.kept]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for d in self.values():
            out["kept" if d.kept else d.reason] += 1
        return dict(out)

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parcel_id", "status", "reason", "date"])
            for pid, d in self.items():
                w.writerow([pid, "kept" if d.kept else "discarded", d.reason or "", d.date.isoformat() if d.date else ""])


def filter_parcels(
    parcel_ids: Sequence[str],
    pixel_sets: Mapping[str, PixelSet],
    clear_counts: Mapping[str, Mapping[date, int]],
    s2_dates: Sequence[date] | None = None,
    outside: Iterable[str] = (),
    min_area_ha: float = DEFAULT_MIN_AREA_HA,
) -> FilterReport:
    """Keep-or-discard decision for every parcel.

    Reasons are checked in order: outside the grid, buffered area below
    ``min_area_ha``, no clear pixel at some multispectral date.
    """
    outside = set(outside)
    report = FilterReport()
    for pid in parcel_ids:
        if pid in outside or pid not in pixel_sets:
            report[pid] = FilterDecision(False, "outside_grid")
            continue
        ps = pixel_sets[pid]
        area_ha = ps.n_survived * ps.meta.pixel_area / 10_000.0
        if area_ha < min_area_ha - 1e-12:
            report[pid] = FilterDecision(False, "too_small_area")
            continue
        counts = clear_counts.get(pid, {})
        dates = sorted(counts) if s2_dates is None else sorted(s2_dates)
        clouded = next((d for d in dates if counts.get(d, 0) == 0), None)
        if clouded is not None:
            report[pid] = FilterDecision(False, "fully_clouded", clouded)
            continue
        report[pid] = FilterDecision(True)
    return report


# --------------------------------------------------------------------------
# long-format CSV


def write_series_csv(path, series: Iterable[ParcelTimeSeries], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id", "crop_type", "date", "feature", "stat", "value", "clear_pixels"])
        for ts in series:
            for key in sorted(ts.entries, key=lambda k: (k[0], k[1].order, k[2].order)):
                when, kind, stat = key
                w.writerow(
                    [
                        ts.parcel_id,
                        ts.crop_type,
                        when.isoformat(),
                        kind.value,
                        stat.value,
                        repr(ts.entries[key]),
                        ts.clear_pixels.get((when, kind), ""),
                    ]
                )


def read_series_csv(path) -> list[ParcelTimeSeries]:
    out: dict[str, ParcelTimeSeries] = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            pid = row["parcel_id"]
            ts = out.get(pid)
            if ts is None:
                ts = out[pid] = ParcelTimeSeries(pid, row.get("crop_type", ""))
            when = date.fromisoformat(row["date"])
            kind = IndexKind(row["feature"])
            ts.entries[(when, kind, StatKind(row["stat"]))] = float(row["value"])
            if row.get("clear_pixels"):
                ts.clear_pixels[(when, kind)] = int(row["clear_pixels"])
    return list(out.values())
