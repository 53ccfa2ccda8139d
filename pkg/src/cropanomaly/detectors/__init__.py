"""Outlier detectors sharing one contract: higher score = more anomalous."""

from __future__ import annotations

from ._common import (
    NotNormalizedError,
    ScoreVector,
    detection_size,
    median_pairwise_distance,
    rank_outliers,
    read_scores_csv,
    write_score_manifest,
    write_scores_csv,
)
from .autoencoder import AeParams, TrainingError, fit_score_autoencoder
from .isolation_forest import IFParams, c_factor, fit_score_isolation_forest
from .loop import LoOPParams, fit_score_loop
from .ocsvm import ConvergenceError, OcSvmParams, fit_score_ocsvm

__all__ = [
    "ALGORITHMS",
    "AeParams",
    "ConvergenceError",
    "IFParams",
    "LoOPParams",
    "NotNormalizedError",
    "OcSvmParams",
    "ScoreVector",
    "TrainingError",
    "c_factor",
    "detection_size",
    "fit_score_autoencoder",
    "fit_score_isolation_forest",
    "fit_score_loop",
    "fit_score_ocsvm",
    "median_pairwise_distance",
    "needs_normalized",
    "rank_outliers",
    "read_scores_csv",
    "run_detector",
    "write_score_manifest",
    "write_scores_csv",
]

ALGORITHMS = ("isolation_forest", "loop", "ocsvm", "autoencoder")
_ALIASES = {"if": "isolation_forest", "iforest": "isolation_forest", "oc-svm": "ocsvm", "ae": "autoencoder"}


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in ALGORITHMS:
        raise ValueError(f"unknown detector {name!r}; choose from {', '.join(ALGORITHMS)}")
    return key


def needs_normalized(name: str) -> bool:
    """Distance and reconstruction based detectors work on min-max scaled input."""
    return canonical_name(name) != "isolation_forest"


def run_detector(name: str, matrix, params: dict | None = None, seed: int = 0, threads: int | None = None) -> ScoreVector:
    """Dispatch by algorithm name with keyword parameters from a config."""
    name = canonical_name(name)
    params = dict(params or {})
    if name == "isolation_forest":
        return fit_score_isolation_forest(matrix, IFParams(seed=seed, threads=threads, **params))
    if name == "loop":
        if "lambda" in params:
            params["lam"] = params.pop("lambda")
        return fit_score_loop(matrix, LoOPParams(**params))
    if name == "ocsvm":
        return fit_score_ocsvm(matrix, OcSvmParams(seed=seed, **params))
    if "hidden" in params:
        params["hidden"] = tuple(params["hidden"])
    return fit_score_autoencoder(matrix, AeParams(seed=seed, **params))
