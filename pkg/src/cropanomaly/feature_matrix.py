"""Detector input matrix: one row per parcel, one column per
(sensor, date, feature, statistic) combination."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Sequence

import numpy as np

from .pixel_features import DEFAULT_S1_FEATURES, DEFAULT_S2_FEATURES, IndexKind
from .zonal_stats import ParcelTimeSeries, StatKind

__all__ = [
    "FeatureColumnKey",
    "FeatureConfig",
    "FeatureMatrix",
    "FeatureSelectionError",
    "TimeWindow",
    "assemble_feature_matrix",
    "expected_column_count",
    "normalize_minmax",
    "read_matrix_csv",
    "select_time_window",
    "write_matrix_csv",
]


class FeatureSelectionError(ValueError):
    pass


@dataclass(frozen=True, order=False)
class FeatureColumnKey:
    sensor: str
    date: date
    feature: IndexKind
    stat: StatKind

    def sort_key(self):
        return (self.sensor, self.date, self.feature.order, self.stat.order)

    def __str__(self):
        return f"{self.sensor}|{self.date.isoformat()}|{self.feature.value}|{self.stat.value}"

    @classmethod
    def parse(cls, text: str) -> FeatureColumnKey:
        try:
            sensor, d, feat, stat = text.split("|")
            return cls(sensor, date.fromisoformat(d), IndexKind(feat), StatKind(stat))
        except ValueError as exc:
            raise FeatureSelectionError(f"bad column header {text!r}") from exc


@dataclass(frozen=True)
class TimeWindow:
    """Date selection applied to column keys.

    ``mode`` is one of ``full_season``, ``before``, ``after`` and
    ``every_kth_s2``.  ``before``/``after`` are strict and filter both
    sensors; ``every_kth_s2`` keeps multispectral dates at chronological
    positions ``offset, offset + k, ...`` and every SAR date.
    """

    mode: str = "full_season"
    date: date | None = None
    k: int = 2
    offset: int = 1

    def __post_init__(self):
        if self.mode not in ("full_season", "before", "after", "every_kth_s2"):
            raise FeatureSelectionError(f"unknown time window mode {self.mode!r}")
        if self.mode in ("before", "after") and self.date is None:
            raise FeatureSelectionError(f"time window {self.mode!r} needs a date")
        if self.mode == "every_kth_s2" and (self.k < 1 or self.offset < 0):
            raise FeatureSelectionError("every_kth_s2 needs k >= 1 and offset >= 0")

    @classmethod
    def full_season(cls):
        return cls("full_season")

    @classmethod
    def before(cls, when: date):
        return cls("before", when)

    @classmethod
    def after(cls, when: date):
        return cls("after", when)

    @classmethod
    def every_kth_s2(cls, k: int = 2, offset: int = 1):
        return cls("every_kth_s2", k=k, offset=offset)

    def select(self, sensor: str, dates: Iterable[date]) -> list[date]:
        dates = sorted(set(dates))
        if self.mode == "before":
            return [d for d in dates if d < self.date]
        if self.mode == "after":
            return [d for d in dates if d > self.date]
        if self.mode == "every_kth_s2" and sensor == "S2":
            return dates[self.offset :: self.k]
        return dates

    def to_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.mode in ("before", "after"):
            out["date"] = self.date.isoformat()
        if self.mode == "every_kth_s2":
            out.update(k=self.k, offset=self.offset)
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> TimeWindow:
        data = dict(data or {})
        when = data.get("date")
        return cls(
            data.get("mode", "full_season"),
            date.fromisoformat(when) if isinstance(when, str) else when,
            int(data.get("k", 2)),
            int(data.get("offset", 1)),
        )


@dataclass(frozen=True)
class FeatureConfig:
    s1_features: tuple = DEFAULT_S1_FEATURES
    s1_stats: tuple = (StatKind.MEDIAN,)
    s2_features: tuple = DEFAULT_S2_FEATURES
    s2_stats: tuple = (StatKind.MEDIAN, StatKind.IQR)
    window: TimeWindow = field(default_factory=TimeWindow)

    def __post_init__(self):
        object.__setattr__(self, "s1_features", tuple(IndexKind(f) for f in self.s1_features))
        object.__setattr__(self, "s2_features", tuple(IndexKind(f) for f in self.s2_features))
        object.__setattr__(self, "s1_stats", tuple(StatKind(s) for s in self.s1_stats))
        object.__setattr__(self, "s2_stats", tuple(StatKind(s) for s in self.s2_stats))
        for f in self.s1_features:
            if f.sensor != "S1":
                raise FeatureSelectionError(f"{f.value} is not a SAR feature")
        for f in self.s2_features:
            if f.sensor != "S2":
                raise FeatureSelectionError(f"{f.value} is not a multispectral feature")

    def by_sensor(self) -> dict[str, tuple[tuple, tuple]]:
        return {"S1": (self.s1_features, self.s1_stats), "S2": (self.s2_features, self.s2_stats)}

    def columns(self, s1_dates: Iterable[date], s2_dates: Iterable[date]) -> list[FeatureColumnKey]:
        keys = []
        for sensor, dates in (("S1", s1_dates), ("S2", s2_dates)):
            feats, stats = self.by_sensor()[sensor]
            for d in self.window.select(sensor, dates):
                for f in feats:
                    for s in stats:
                        keys.append(FeatureColumnKey(sensor, d, f, s))
        return sorted(keys, key=FeatureColumnKey.sort_key)

    def to_dict(self) -> dict:
        return {
            "s1": [f.value for f in self.s1_features],
            "s1_stats": [s.value for s in self.s1_stats],
            "s2": [f.value for f in self.s2_features],
            "s2_stats": [s.value for s in self.s2_stats],
            "window": self.window.to_dict(),
        }


def expected_column_count(n1_images, n1_features, n1_stats, n2_images, n2_features, n2_stats) -> int:
    return n1_images * n1_features * n1_stats + n2_images * n2_features * n2_stats


@dataclass
class FeatureMatrix:
    row_ids: list
    columns: list
    values: np.ndarray
    state: str = "raw"
    dropped: dict = field(default_factory=dict)
    col_min: np.ndarray | None = None
    col_max: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_ids), len(self.columns)):
            raise ValueError(
                f"matrix shape {self.values.shape} does not match "
                f"{len(self.row_ids)} rows x {len(self.columns)} columns"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.row_ids).encode())
        h.update("\n".join(str(c) for c in self.columns).encode())
        h.update(self.state.encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def take_columns(self, mask: np.ndarray) -> FeatureMatrix:
        mask = np.asarray(mask, dtype=bool)
        return replace(
            self,
            columns=[c for c, m in zip(self.columns, mask) if m],
            values=self.values[:, mask],
            col_min=None if self.col_min is None else self.col_min[mask],
            col_max=None if self.col_max is None else self.col_max[mask],
        )


def _available_dates(series: Sequence[ParcelTimeSeries]) -> dict[str, list[date]]:
    found: dict[str, set] = {"S1": set(), "S2": set()}
    for ts in series:
        for when, kind, _ in ts.entries:
            found[kind.sensor].add(when)
    return {k: sorted(v) for k, v in found.items()}


def assemble_feature_matrix(series: Sequence[ParcelTimeSeries], config: FeatureConfig | None = None) -> FeatureMatrix:
    """Stack parcel time series into the detector input matrix.

    Parcels lacking any selected entry are left out and listed in
    ``dropped`` with their number of missing cells.
    """
    config = config or FeatureConfig()
    series = list(series)
    if not (config.s1_features and config.s1_stats) and not (config.s2_features and config.s2_stats):
        raise FeatureSelectionError("no feature/statistic selected")
    avail = _available_dates(series)
    columns = config.columns(
        avail["S1"] if config.s1_features and config.s1_stats else [],
        avail["S2"] if config.s2_features and config.s2_stats else [],
    )
    if not columns:
        raise FeatureSelectionError("selection leaves no column")
    lookup = [(c.date, c.feature, c.stat) for c in columns]
    rows, ids, dropped = [], [], {}
    for ts in series:
        get = ts.entries.get
        row = [get(k) for k in lookup]
        n_missing = sum(v is None for v in row)
        if n_missing:
            dropped[ts.parcel_id] = n_missing
            continue
        rows.append(row)
        ids.append(ts.parcel_id)
    if not ids:
        raise FeatureSelectionError("every parcel has missing entries for this selection")
    return FeatureMatrix(ids, columns, np.array(rows, dtype=np.float64), "raw", dropped)


def normalize_minmax(matrix: FeatureMatrix) -> FeatureMatrix:
    """Per-column rescaling to [0, 1]; constant columns become 0."""
    x = matrix.values
    lo = x.min(axis=0) if x.size else np.zeros(x.shape[1])
    hi = x.max(axis=0) if x.size else np.zeros(x.shape[1])
    span = hi - lo
    const = span == 0
    out = np.where(const, 0.0, (x - lo) / np.where(const, 1.0, span))
    return replace(matrix, values=out, state="minmax", col_min=lo, col_max=hi)


def select_time_window(matrix: FeatureMatrix, window: TimeWindow) -> FeatureMatrix:
    keep_dates = {
        sensor: set(window.select(sensor, {c.date for c in matrix.columns if c.sensor == sensor}))
        for sensor in ("S1", "S2")
    }
    mask = np.array([c.date in keep_dates[c.sensor] for c in matrix.columns], dtype=bool)
    if not mask.any():
        raise FeatureSelectionError("time window leaves no column")
    return matrix.take_columns(mask)


def write_matrix_csv(path, matrix: FeatureMatrix, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(f"# state={matrix.state}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id"] + [str(c) for c in matrix.columns])
        for pid, row in zip(matrix.row_ids, matrix.values):
            w.writerow([pid] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> FeatureMatrix:
    state = "raw"
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                text = line[1:].strip()
                if text.startswith("state="):
                    state = text.split("=", 1)[1]
                continue
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    if not header or header[0] != "parcel_id":
        raise FeatureSelectionError("matrix CSV must start with a parcel_id column")
    columns = [FeatureColumnKey.parse(h) for h in header[1:]]
    ids, rows = [], []
    for rec in reader:
        ids.append(rec[0])
        rows.append([float(v) for v in rec[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(columns))
    return FeatureMatrix(ids, columns, values, state)
