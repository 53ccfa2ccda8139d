from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from ..feature_matrix import FeatureMatrix
from ..zonal_stats import percentile

__all__ = [
    "NotNormalizedError",
    "ScoreVector",
    "as_array",
    "median_pairwise_distance",
    "rank_outliers",
    "read_scores_csv",
    "write_score_manifest",
    "write_scores_csv",
]

MAX_EXACT_PAIRWISE_ROWS = 2000


class NotNormalizedError(ValueError):
    """A distance-based detector received a raw (unscaled) feature matrix."""


@dataclass
class ScoreVector:
    """Outlier scores aligned with matrix rows; higher means more anomalous."""

    parcel_ids: list
    scores: np.ndarray
    algorithm: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.parcel_ids = [str(p) for p in self.parcel_ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.parcel_ids),):
            raise ValueError("scores and parcel ids differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.algorithm}: non-finite outlier scores")

    def __len__(self):
        return len(self.parcel_ids)

    def order(self) -> list[int]:
        """Row indices from most to least anomalous (ties: smaller id first)."""
        return sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], self.parcel_ids[i]))

    def ranks(self) -> dict[str, int]:
        return {self.parcel_ids[i]: r + 1 for r, i in enumerate(self.order())}


def as_array(matrix, require_normalized: bool = False, algorithm: str = "") -> tuple[np.ndarray, list]:
    if isinstance(matrix, FeatureMatrix):
        if require_normalized and matrix.state != "minmax":
            raise NotNormalizedError(f"{algorithm} expects a min-max normalized matrix")
        return matrix.values, list(matrix.row_ids)
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("feature matrix must be two-dimensional")
    return x, [str(i) for i in range(x.shape[0])]


def detection_size(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"outlier ratio must lie in (0, 1], got {ratio}")
    # guard against 0.07 * 100 = 7.000000000000001
    return min(n, int(math.ceil(ratio * n - 1e-9)))


def rank_outliers(scores: ScoreVector, outlier_ratio: float) -> list[str]:
    """Ids of the ceil(ratio * n) highest-scoring parcels, most anomalous first."""
    k = detection_size(len(scores), outlier_ratio)
    order = scores.order()
    return [scores.parcel_ids[i] for i in order[:k]]


def median_pairwise_distance(matrix, seed: int = 0, max_rows: int = MAX_EXACT_PAIRWISE_ROWS) -> float:
    """Median Euclidean distance over all row pairs.

    Above ``max_rows`` rows a seeded uniform subsample of ``max_rows`` rows
    is used instead.
    """
    x, _ = as_array(matrix)
    if x.shape[0] < 2:
        raise ValueError("need at least two rows for pairwise distances")
    if x.shape[0] > max_rows:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(x.shape[0], size=max_rows, replace=False))]
    return percentile(pdist(x), 0.5)


def write_scores_csv(path, scores: ScoreVector, header_comment: str | None = None) -> None:
    ranks = scores.ranks()
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id", "score", "rank"])
        for pid, s in zip(scores.parcel_ids, scores.scores):
            w.writerow([pid, repr(float(s)), ranks[pid]])


def read_scores_csv(path, algorithm: str = "unknown") -> ScoreVector:
    ids, vals = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            ids.append(row["parcel_id"])
            vals.append(float(row["score"]))
    return ScoreVector(ids, np.array(vals), algorithm)


def write_score_manifest(path, scores: ScoreVector, matrix_fingerprint: str, extra: dict | None = None) -> None:
    doc = {
        "algorithm": scores.algorithm,
        "parameters": scores.params,
        "seed": scores.seed,
        "matrix_fingerprint": matrix_fingerprint,
        "n_rows": len(scores),
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def pairwise_sq_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    from scipy.spatial.distance import cdist

    return cdist(x, x if y is None else y, metric="sqeuclidean")

