"""Local Outlier Probabilities on the k-nearest-neighbour context set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import erf

from ._common import ScoreVector, as_array

__all__ = ["LoOPParams", "fit_score_loop", "knn_indices"]

DEFAULT_K = 701
# rows of the distance matrix held in memory at once
_CHUNK = 512


@dataclass
class LoOPParams:
    k: int | None = None
    lam: float = 2.0

    def resolve_k(self, n_rows: int) -> int:
        """``k`` if given, otherwise ``min(701, n_rows - 1)``."""
        if n_rows < 2:
            raise ValueError("LoOP needs at least two rows")
        k = min(DEFAULT_K, n_rows - 1) if self.k is None else int(self.k)
        if not 1 <= k < n_rows:
            raise ValueError(f"LoOP k must satisfy 1 <= k < rows ({n_rows}), got {k}")
        if not self.lam > 0:
            raise ValueError("LoOP lambda must be positive")
        return k


def knn_indices(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and Euclidean distances of each row's k nearest other rows.

    Ties are broken by row index; a row is never its own neighbour.
    """
    n = x.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for start in range(0, n, _CHUNK):
        stop = min(n, start + _CHUNK)
        d = cdist(x[start:stop], x)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[start:stop] = order
        dist[start:stop] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def fit_score_loop(matrix, params: LoOPParams | None = None) -> ScoreVector:
    """Outlier probability in [0, 1] for every row.

    Each point's probabilistic distance ``lam * sqrt(mean d^2)`` over its
    k neighbours is compared with the average over those neighbours; the
    resulting PLOF is squashed through the Gaussian error function.
    """
    params = params or LoOPParams()
    x, ids = as_array(matrix, require_normalized=True, algorithm="LoOP")
    k = params.resolve_k(x.shape[0])
    nbr, dist = knn_indices(np.ascontiguousarray(x, dtype=np.float64), k)
    pdist = params.lam * np.sqrt(np.mean(dist**2, axis=1))
    ref = pdist[nbr].mean(axis=1)
    plof = np.zeros_like(pdist)
    pos = ref > 0
    plof[pos] = pdist[pos] / ref[pos] - 1.0
    # a point with spread where its neighbours have none
    inf_mask = (~pos) & (pdist > 0)
    finite = plof[~inf_mask]
    nplof = params.lam * math.sqrt(float(np.mean(finite**2))) if finite.size else 0.0
    scores = np.zeros_like(pdist)
    if nplof > 0:
        scores = np.maximum(0.0, erf(plof / (nplof * math.sqrt(2.0))))
    scores[inf_mask] = 1.0
    return ScoreVector(ids, scores, "loop", {"k": k, "lambda": params.lam}, None)
