"""Scoring detections against expert (or synthetic) labels."""

from __future__ import annotations

import csv
import enum
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .detectors import ScoreVector, detection_size, rank_outliers

__all__ = [
    "AnomalyCategory",
    "DEFAULT_RATIO_GRID",
    "LabelSet",
    "PrecisionCurve",
    "UnlabeledDetectionError",
    "category_histogram",
    "compare_detections",
    "normalized_auc",
    "per_category_recall",
    "precision_at",
    "precision_curve",
    "read_labels",
    "write_curve_csv",
    "write_labels",
]


class UnlabeledDetectionError(ValueError):
    def __init__(self, ids: Iterable[str]):
        self.ids = sorted(ids)
        shown = ", ".join(self.ids[:20]) + (" ..." if len(self.ids) > 20 else "")
        super().__init__(f"{len(self.ids)} detected parcel(s) lack a label: {shown}")


class AnomalyCategory(str, enum.Enum):
    HETEROGENEITY = "HETEROGENEITY"
    HETEROGENEITY_TWO_PARTS = "HETEROGENEITY_TWO_PARTS"
    HETEROGENEITY_AFTER_SENESCENCE = "HETEROGENEITY_AFTER_SENESCENCE"
    EARLY_HETEROGENEITY = "EARLY_HETEROGENEITY"
    LATE_GROWTH = "LATE_GROWTH"
    VIGOROUS_CROP = "VIGOROUS_CROP"
    EARLY_FLOWERING = "EARLY_FLOWERING"
    EARLY_SENESCENCE = "EARLY_SENESCENCE"
    LATE_SENESCENCE = "LATE_SENESCENCE"
    WRONG_TYPE = "WRONG_TYPE"
    WRONG_SHAPE = "WRONG_SHAPE"
    NORMAL_CHECKED = "NORMAL_CHECKED"
    TOO_SMALL = "TOO_SMALL"
    SAR_ANOMALY = "SAR_ANOMALY"
    SHADOW = "SHADOW"

    @property
    def tp_flag(self) -> bool:
        """True for heterogeneity, growth and database-error categories."""
        return self not in _FALSE_POSITIVES


_FALSE_POSITIVES = frozenset(
    {AnomalyCategory.NORMAL_CHECKED, AnomalyCategory.TOO_SMALL, AnomalyCategory.SAR_ANOMALY, AnomalyCategory.SHADOW}
)
TP_CATEGORIES = tuple(c for c in AnomalyCategory if c.tp_flag)

DEFAULT_RATIO_GRID = tuple(round(0.01 * i, 2) for i in range(1, 51))


class LabelSet(dict):
    """parcel id -> AnomalyCategory; absent ids are unlabeled."""

    def __init__(self, mapping: Mapping | Iterable = ()):
        super().__init__()
        items = mapping.items() if isinstance(mapping, Mapping) else mapping
        for pid, cat in items:
            self[str(pid)] = AnomalyCategory(cat)

    def category_counts(self, universe: Iterable[str] | None = None) -> Counter:
        ids = self.keys() if universe is None else (str(p) for p in universe)
        return Counter(self[p] for p in ids if p in self)

    def ids_of(self, category: AnomalyCategory) -> set[str]:
        category = AnomalyCategory(category)
        return {p for p, c in self.items() if c is category}


def _labels_for(detected: Iterable[str], labels: LabelSet) -> list[AnomalyCategory]:
    detected = [str(p) for p in detected]
    missing = [p for p in detected if p not in labels]
    if missing:
        raise UnlabeledDetectionError(missing)
    return [labels[p] for p in detected]


def precision_at(detected: Iterable[str], labels: LabelSet) -> float:
    """Share of detected parcels whose category counts as a true positive."""
    cats = _labels_for(set(detected), labels)
    if not cats:
        raise ValueError("precision of an empty detection set is undefined")
    return sum(c.tp_flag for c in cats) / len(cats)


@dataclass
class PrecisionCurve:
    ratios: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.precision = np.asarray(self.precision, dtype=np.float64)
        if self.ratios.shape != self.precision.shape or self.ratios.ndim != 1:
            raise ValueError("ratios and precision must be 1-D arrays of equal length")
        if np.any(np.diff(self.ratios) <= 0):
            raise ValueError("curve ratios must be strictly increasing")
        if self.ratios.size and (self.ratios[0] <= 0 or self.ratios[-1] > 0.5 + 1e-12):
            raise ValueError("curve ratios must lie in (0, 0.5]")

    def at(self, ratio: float) -> float:
        i = int(np.argmin(np.abs(self.ratios - ratio)))
        if abs(self.ratios[i] - ratio) > 1e-9:
            raise KeyError(f"ratio {ratio} is not on the curve grid")
        return float(self.precision[i])


def precision_curve(scores: ScoreVector, labels: LabelSet, grid: Iterable[float] = DEFAULT_RATIO_GRID) -> PrecisionCurve:
    """Precision of the top-ranked parcels at every ratio of ``grid``."""
    grid = np.asarray(list(grid), dtype=np.float64)
    n = len(scores)
    sizes = [detection_size(n, r) for r in grid]
    order = scores.order()[: max(sizes)]
    cats = _labels_for([scores.parcel_ids[i] for i in order], labels)
    cum = np.cumsum([c.tp_flag for c in cats])
    return PrecisionCurve(grid, np.array([cum[k - 1] / k for k in sizes]))


def normalized_auc(curve: PrecisionCurve) -> float:
    """Trapezoid area under precision over [0, 0.5], divided by 0.5.

    The curve is held at its first value down to ratio 0.
    """
    if curve.ratios.size == 0:
        raise ValueError("empty curve")
    r = np.concatenate([[0.0], curve.ratios])
    p = np.concatenate([[curve.precision[0]], curve.precision])
    if r[-1] < 0.5:
        r = np.append(r, 0.5)
        p = np.append(p, p[-1])
    area = float(np.sum(0.5 * (p[1:] + p[:-1]) * np.diff(r)))
    return area / 0.5


def category_histogram(detected: Iterable[str], labels: LabelSet) -> dict[str, float]:
    """Percentage of detections falling in each (non-empty) category."""
    cats = _labels_for(sorted(set(detected)), labels)
    if not cats:
        raise ValueError("histogram of an empty detection set")
    counts = Counter(cats)
    return {c.value: 100.0 * counts[c] / len(cats) for c in AnomalyCategory if counts[c]}


def per_category_recall(detected: Iterable[str], labels: LabelSet, universe: Iterable[str] | None = None) -> dict[str, float]:
    """Percentage of each category's parcels that were detected."""
    detected = {str(p) for p in detected}
    pool = labels.keys() if universe is None else {str(p) for p in universe}
    totals: Counter = Counter()
    hits: Counter = Counter()
    for pid in pool:
        if pid not in labels:
            continue
        cat = labels[pid]
        totals[cat] += 1
        hits[cat] += pid in detected
    return {c.value: 100.0 * hits[c] / totals[c] for c in AnomalyCategory if totals[c]}


def compare_detections(run_a: Iterable[str], run_b: Iterable[str], labels: LabelSet | None = None,
                       universe_a: Iterable[str] | None = None, universe_b: Iterable[str] | None = None) -> dict:
    """Overlap of two detection sets, with per-category counts of each difference."""
    if universe_a is not None and universe_b is not None:
        ua, ub = {str(p) for p in universe_a}, {str(p) for p in universe_b}
        if ua != ub:
            raise ValueError(f"runs cover different parcels ({len(ua ^ ub)} ids differ)")
    a = {str(p) for p in run_a}
    b = {str(p) for p in run_b}
    union = a | b
    report = {
        "n_a": len(a),
        "n_b": len(b),
        "intersection": len(a & b),
        "a_minus_b": len(a - b),
        "b_minus_a": len(b - a),
        "jaccard": len(a & b) / len(union) if union else 1.0,
    }
    if labels is not None:
        for key, ids in (("a_minus_b_by_category", a - b), ("b_minus_a_by_category", b - a)):
            counts = Counter(labels[p].value if p in labels else "UNLABELED" for p in ids)
            report[key] = dict(sorted(counts.items()))
    return report


def read_labels(path) -> LabelSet:
    """Labels from CSV (parcel_id, category) or JSON (id -> category)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        if isinstance(doc, dict) and "labels" in doc:
            doc = doc["labels"]
        return LabelSet(doc)
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return LabelSet((r["parcel_id"], r["category"]) for r in rows)


def write_labels(path, labels: LabelSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id", "category"])
        for pid in sorted(labels):
            w.writerow([pid, labels[pid].value])


def write_curve_csv(path, curve: PrecisionCurve, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio", "precision"])
        for r, p in zip(curve.ratios, curve.precision):
            w.writerow([f"{r:.2f}" if abs(r * 100 - round(r * 100)) < 1e-9 else repr(float(r)), repr(float(p))])


def evaluate_scores(scores: ScoreVector, labels: LabelSet, ratios: Iterable[float], grid=DEFAULT_RATIO_GRID) -> dict:
    """Evaluation report block for one score vector."""
    curve = precision_curve(scores, labels, grid)
    out = {"auc": normalized_auc(curve), "per_ratio": {}}
    for r in ratios:
        det = rank_outliers(scores, r)
        out["per_ratio"][f"{r:g}"] = {
            "n_detected": len(det),
            "precision": precision_at(det, labels),
            "histogram": category_histogram(det, labels),
            "recall": per_category_recall(det, labels, scores.parcel_ids),
        }
    return out
