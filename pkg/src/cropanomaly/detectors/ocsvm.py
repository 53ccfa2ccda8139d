"""One-class SVM with a Gaussian kernel, solved in the dual by pairwise
coordinate optimization (maximal violating pair)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from ._common import ScoreVector, as_array, median_pairwise_distance, pairwise_sq_distances

__all__ = ["ConvergenceError", "OcSvmParams", "OcSvmSolution", "fit_score_ocsvm", "rbf_kernel", "solve_dual"]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


@dataclass
class OcSvmParams:
    nu: float = 0.1
    sigma: float | None = None
    tol: float = 1e-6
    max_iter: int = 1_000_000
    seed: int = 0

    def validate(self, n_rows: int) -> None:
        if not 0 < self.nu <= 1:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.nu * n_rows < 1 - 1e-12:
            raise ValueError(f"nu * n must be >= 1 (nu={self.nu}, n={n_rows})")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class OcSvmSolution:
    alpha: np.ndarray
    gradient: np.ndarray
    rho: float
    objective: float
    violation: float
    iterations: int
    upper: float


def rbf_kernel(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-pairwise_sq_distances(x) / (2.0 * sigma * sigma))


@numba.njit(cache=True)
def _smo(K, alpha, grad, upper, tol, max_iter):
    n = alpha.shape[0]
    it = 0
    gap = 0.0
    while True:
        i = -1
        j = -1
        gi = np.inf
        gj = -np.inf
        for p in range(n):
            if alpha[p] < upper and grad[p] < gi:
                gi = grad[p]
                i = p
            if alpha[p] > 0.0 and grad[p] > gj:
                gj = grad[p]
                j = p
        if i < 0 or j < 0:
            gap = 0.0
            break
        gap = gj - gi
        if gap <= tol or it >= max_iter:
            break
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        room_i = upper - alpha[i]
        room_j = alpha[j]
        room = min(room_i, room_j)
        step = room if eta <= 1e-15 else min(gap / eta, room)
        # land exactly on the bounds
        alpha[i] = upper if step >= room_i else alpha[i] + step
        alpha[j] = 0.0 if step >= room_j else alpha[j] - step
        for p in range(n):
            grad[p] += step * (K[p, i] - K[p, j])
        it += 1
    return it, gap


def _initial_alpha(n: int, upper: float) -> np.ndarray:
    alpha = np.zeros(n)
    m = min(n, int(math.floor(1.0 / upper + 1e-9)))
    alpha[:m] = upper
    rest = 1.0 - m * upper
    if m < n and rest > 0:
        alpha[m] = rest
    return alpha


def solve_dual(K: np.ndarray, nu: float, tol: float = 1e-6, max_iter: int = 1_000_000) -> OcSvmSolution:
    """Minimize ``0.5 a' K a`` over ``0 <= a <= 1/(nu n)``, ``sum(a) = 1``."""
    K = np.ascontiguousarray(K, dtype=np.float64)
    n = K.shape[0]
    upper = 1.0 / (nu * n)
    alpha = _initial_alpha(n, upper)
    grad = K @ alpha
    it, gap = _smo(K, alpha, grad, upper, tol, max_iter)
    if gap > tol:
        raise ConvergenceError(f"OC-SVM did not converge in {it} pair updates; KKT violation {gap:.3e}", gap)
    free = (alpha > 0) & (alpha < upper)
    if free.any():
        rho = float(grad[free].mean())
    else:
        at_upper = grad[alpha >= upper]
        at_zero = grad[alpha <= 0]
        lo = at_upper.max() if at_upper.size else at_zero.min()
        hi = at_zero.min() if at_zero.size else at_upper.max()
        rho = 0.5 * (lo + hi)
    objective = 0.5 * float(alpha @ grad)
    return OcSvmSolution(alpha, grad, rho, objective, float(gap), int(it), upper)


def fit_score_ocsvm(matrix, params: OcSvmParams | None = None) -> ScoreVector:
    """Score ``rho - f(x)``: positive outside the learned support."""
    params = params or OcSvmParams()
    x, ids = as_array(matrix, require_normalized=True, algorithm="OC-SVM")
    params.validate(x.shape[0])
    sigma = params.sigma if params.sigma is not None else median_pairwise_distance(x, seed=params.seed)
    if not sigma > 0:
        raise ValueError("median pairwise distance is zero; pass sigma explicitly")
    sol = solve_dual(rbf_kernel(x, sigma), params.nu, params.tol, params.max_iter)
    recorded = {"nu": params.nu, "sigma": float(sigma), "tol": params.tol, "max_iter": params.max_iter,
                "iterations": sol.iterations}
    return ScoreVector(ids, sol.rho - sol.gradient, "ocsvm", recorded, params.seed)
