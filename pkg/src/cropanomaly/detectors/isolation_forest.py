"""Isolation forest scoring.

Trees are grown on subsamples drawn without replacement.  Every random
number a tree consumes is drawn up front from a generator seeded by
``(seed, tree_index)``, so the forest does not depend on how trees are
scheduled across threads.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy.special import digamma

from ._common import ScoreVector, as_array

__all__ = ["IFParams", "c_factor", "fit_score_isolation_forest", "path_lengths"]

EULER_GAMMA = 0.5772156649

# numba falls back to another threading layer on its own; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)


@dataclass
class IFParams:
    n_trees: int = 1000
    n_samples: int = 256
    seed: int = 0
    threads: int | None = None

    def validate(self, n_rows: int) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if n_rows < 2:
            raise ValueError("isolation forest needs at least two rows")


def c_factor(n: int, exact: bool = False) -> float:
    """Average unsuccessful-search path length in a binary search tree of n
    points, ``2 H(n-1) - 2 (n-1) / n``.

    By default ``H(i)`` is approximated by ``ln(i) + gamma`` except for
    ``H(1) = 1``; ``exact=True`` uses the true harmonic number.
    """
    if n < 2:
        raise ValueError("c_factor needs n >= 2")
    if exact:
        h = float(digamma(n) + np.euler_gamma)
    elif n == 2:
        h = 1.0
    else:
        h = math.log(n - 1) + EULER_GAMMA
    return 2.0 * h - 2.0 * (n - 1) / n


@numba.njit(cache=True)
def _c_leaf(n):
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1.0) + 0.5772156649) - 2.0 * (n - 1.0) / n


@numba.njit(cache=True)
def _grow(x, sample, feat_u, split_u, max_depth, feature, threshold, left, right, size):
    n_feat = x.shape[1]
    idx = sample.copy()
    cap = feature.shape[0]
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    ok = np.empty(n_feat, np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = idx.shape[0]
    st_depth[0] = 0
    top = 1
    next_node = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        n = hi - lo
        size[node] = n
        feature[node] = -1
        if depth >= max_depth or n <= 1:
            continue
        f = min(int(feat_u[node] * n_feat), n_feat - 1)
        vmin = x[idx[lo], f]
        vmax = vmin
        for p in range(lo + 1, hi):
            v = x[idx[p], f]
            if v < vmin:
                vmin = v
            if v > vmax:
                vmax = v
        if not vmax > vmin:
            n_ok = 0
            for j in range(n_feat):
                a = x[idx[lo], j]
                b = a
                for p in range(lo + 1, hi):
                    v = x[idx[p], j]
                    if v < a:
                        a = v
                    if v > b:
                        b = v
                if b > a:
                    ok[n_ok] = j
                    n_ok += 1
            if n_ok == 0:
                continue
            f = ok[min(int(feat_u[node] * n_ok), n_ok - 1)]
            vmin = x[idx[lo], f]
            vmax = vmin
            for p in range(lo + 1, hi):
                v = x[idx[p], f]
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
        t = vmin + split_u[node] * (vmax - vmin)
        # partition idx[lo:hi] so that x < t comes first
        i = lo
        j = hi - 1
        while i <= j:
            if x[idx[i], f] < t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = f
        threshold[node] = t
        left[node] = next_node
        right[node] = next_node + 1
        # right pushed first so the left subtree is grown first
        st_node[top] = next_node + 1
        st_lo[top] = i
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = next_node
        st_lo[top] = lo
        st_hi[top] = i
        st_depth[top] = depth + 1
        top += 1
        next_node += 2


@numba.njit(cache=True)
def _path_length_one(x, feature, threshold, left, right, size, out):
    for r in range(x.shape[0]):
        node = 0
        depth = 0
        while feature[node] >= 0:
            if x[r, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
            depth += 1
        out[r] = depth + _c_leaf(size[node])


@numba.njit(parallel=True, cache=True)
def _forest_path_lengths(x, samples, feat_u, split_u, max_depth, cap):
    n_trees = samples.shape[0]
    out = np.empty((n_trees, x.shape[0]))
    for t in numba.prange(n_trees):
        feature = np.empty(cap, np.int64)
        threshold = np.zeros(cap)
        left = np.zeros(cap, np.int64)
        right = np.zeros(cap, np.int64)
        size = np.zeros(cap, np.int64)
        _grow(x, samples[t], feat_u[t], split_u[t], max_depth, feature, threshold, left, right, size)
        _path_length_one(x, feature, threshold, left, right, size, out[t])
    return out


def _draws(n_rows: int, psi: int, n_trees: int, cap: int, seed: int):
    samples = np.empty((n_trees, psi), dtype=np.int64)
    feat_u = np.empty((n_trees, cap))
    split_u = np.empty((n_trees, cap))
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        samples[t] = rng.choice(n_rows, size=psi, replace=False)
        feat_u[t] = rng.random(cap)
        split_u[t] = rng.random(cap)
    return samples, feat_u, split_u


def path_lengths(x: np.ndarray, params: IFParams) -> tuple[np.ndarray, int]:
    """Per-tree path lengths, shape ``(n_trees, n_rows)``, and the subsample size."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    params.validate(x.shape[0])
    psi = min(params.n_samples, x.shape[0])
    max_depth = int(math.ceil(math.log2(psi)))
    cap = 2 ** (max_depth + 1) - 1
    samples, feat_u, split_u = _draws(x.shape[0], psi, params.n_trees, cap, params.seed)
    if params.threads:
        prev = numba.get_num_threads()
        numba.set_num_threads(min(params.threads, numba.config.NUMBA_NUM_THREADS))
        try:
            out = _forest_path_lengths(x, samples, feat_u, split_u, max_depth, cap)
        finally:
            numba.set_num_threads(prev)
    else:
        out = _forest_path_lengths(x, samples, feat_u, split_u, max_depth, cap)
    return out, psi


def fit_score_isolation_forest(matrix, params: IFParams | None = None) -> ScoreVector:
    """Anomaly score ``2 ** (-E[h(x)] / c(psi))`` for every row."""
    params = params or IFParams()
    x, ids = as_array(matrix)
    lengths, psi = path_lengths(x, params)
    # fixed summation order over trees
    mean_h = np.zeros(x.shape[0])
    for row in lengths:
        mean_h += row
    mean_h /= lengths.shape[0]
    scores = 2.0 ** (-mean_h / c_factor(psi))
    recorded = {k: v for k, v in asdict(params).items() if k != "threads"}
    recorded["n_samples_used"] = psi
    return ScoreVector(ids, scores, "isolation_forest", recorded, params.seed)
