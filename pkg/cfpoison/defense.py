"""Outlier-based data sanitization defenses."""

import logging
import math
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.ensemble import IsolationForest
from sklearn.neighbors import LocalOutlierFactor

from .models import Dataset, DefenseSpec, DetectionError, DetectionReport

logger = logging.getLogger(__name__)


def _matrix(data) -> np.ndarray:
    X = np.asarray(data, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def iforest_scores(data, spec: DefenseSpec) -> np.ndarray:
    """Isolation scores 2^(-E[h]/c(psi)); higher is more anomalous"""
    X = _matrix(data)
    if len(X) < 2:
        raise DetectionError("isolation forest needs at least 2 rows")
    forest = IsolationForest(
        n_estimators=spec.trees,
        max_samples=min(spec.subsample, len(X)),
        random_state=spec.seed % (2**32),
    )
    forest.fit(X)
    return -forest.score_samples(X)


def lof_scores(data, spec: DefenseSpec) -> np.ndarray:
    """Local outlier factors with ``lof_k`` neighbors; about 1 for inliers"""
    X = _matrix(data)
    if spec.lof_k >= len(X) - 1:
        raise DetectionError(f"lof_k ({spec.lof_k}) must be smaller than n - 1 ({len(X) - 1})")
    lof = LocalOutlierFactor(n_neighbors=spec.lof_k)
    lof.fit(X)
    return -lof.negative_outlier_factor_


def knn_scores(data, labels, k: int, same_class: bool = True) -> np.ndarray:
    """Distance of every row to its k-th nearest other row (same class by default)"""
    X = _matrix(data)
    labels = np.asarray(labels)
    dist = cdist(X, X)
    np.fill_diagonal(dist, np.inf)
    if same_class:
        dist[labels[:, None] != labels[None, :]] = np.inf
    ordered = np.sort(dist, axis=1)
    available = np.sum(np.isfinite(ordered), axis=1)
    column = np.clip(np.minimum(k, available) - 1, 0, None)
    scores = ordered[np.arange(len(X)), column]
    # a row without any neighbor is maximally isolated
    return np.where(available == 0, np.inf, scores)


def _centroids(X: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise DetectionError("centroid defenses need both classes")
    return X[labels == 0].mean(axis=0), X[labels == 1].mean(axis=0)


def l2_scores(data, labels) -> np.ndarray:
    """Distance of every row to its class centroid"""
    X = _matrix(data)
    labels = np.asarray(labels)
    mu0, mu1 = _centroids(X, labels)
    means = np.where(labels[:, None] == 0, mu0, mu1)
    return np.linalg.norm(X - means, axis=1)


def slab_scores(data, labels) -> np.ndarray:
    """Absolute projection of every row's offset from its class centroid onto mu0 - mu1"""
    X = _matrix(data)
    labels = np.asarray(labels)
    mu0, mu1 = _centroids(X, labels)
    means = np.where(labels[:, None] == 0, mu0, mu1)
    return np.abs((X - means) @ (mu0 - mu1))


def threshold_flags(scores, nu: float) -> np.ndarray:
    """Flag rows whose score reaches ``nu``; zero scores and an infinite ``nu`` never flag"""
    scores = np.asarray(scores, dtype=float)
    if not math.isfinite(nu):
        return np.zeros(len(scores), dtype=bool)
    return (scores >= nu) & (scores > 0)


def knn_defense(data, labels, k: int, nu: float, same_class: bool = True) -> np.ndarray:
    return threshold_flags(knn_scores(data, labels, k, same_class), nu)


def l2_defense(data, labels, nu: float) -> np.ndarray:
    return threshold_flags(l2_scores(data, labels), nu)


def slab_defense(data, labels, nu: float) -> np.ndarray:
    return threshold_flags(slab_scores(data, labels), nu)


def calibrate_threshold(scores_on_clean, fpr: float) -> float:
    """
    Threshold flagging floor(fpr * n) clean scores.

    With m = floor(fpr * n), the threshold is the m-th largest clean score; when m is 0 it
    is the next float above the maximum so that no clean row is flagged. Tied scores are
    flagged together.
    """
    scores = np.sort(np.asarray(scores_on_clean, dtype=float))[::-1]
    if scores.size == 0:
        raise DetectionError("calibration needs at least one clean score")
    if not 0 < fpr < 1:
        raise DetectionError(f"fpr must be in (0, 1), got {fpr}")
    m = int(math.floor(round(fpr * scores.size, 9)))
    if m == 0:
        return float(np.nextafter(scores[0], np.inf))
    return float(scores[m - 1])


def evaluate_detection(
    flags,
    poison_indices,
    scores=None,
    threshold: float = math.nan,
    method: str = "",
) -> DetectionReport:
    """Recall and precision of ``flags`` against the known poison rows"""
    flags = np.asarray(flags, dtype=bool)
    poison_indices = np.asarray(poison_indices, dtype=int)
    truth = np.zeros(len(flags), dtype=bool)
    truth[poison_indices] = True
    tp = int(np.sum(flags & truth))
    recall = tp / int(truth.sum()) if truth.any() else 0.0
    precision_defined = bool(flags.any())
    precision = tp / int(flags.sum()) if precision_defined else 0.0
    return DetectionReport(
        method=method,
        flags=flags,
        scores=np.zeros(len(flags)) if scores is None else np.asarray(scores, dtype=float),
        threshold=float(threshold),
        recall=float(recall),
        precision=float(precision),
        precision_defined=precision_defined,
        poison_indices=poison_indices,
    )


# score function: (features, labels, spec) -> scores
ScoreFunction = Callable[[np.ndarray, np.ndarray, DefenseSpec], np.ndarray]

# Registry of available defenses
DEFENSES: dict[str, ScoreFunction] = {
    "iforest": lambda X, y, spec: iforest_scores(X, spec),
    "lof": lambda X, y, spec: lof_scores(X, spec),
    "knn_defense": lambda X, y, spec: knn_scores(X, y, spec.k, spec.same_class),
    "l2_defense": lambda X, y, spec: l2_scores(X, y),
    "slab_defense": lambda X, y, spec: slab_scores(X, y),
}


def run_defense(spec: DefenseSpec, clean: Dataset, screened: Dataset, poison_indices) -> DetectionReport:
    """
    Calibrate ``spec.method`` on an unpoisoned hold-out set and screen a training set.

    Both sets are scored on their own: the threshold is the clean quantile, then applied to
    the scores of ``screened``.
    """
    score = DEFENSES[spec.method]
    nu = calibrate_threshold(score(clean.features, clean.labels, spec), spec.calibration_fpr)
    scores = score(screened.features, screened.labels, spec)
    flags = threshold_flags(scores, nu)
    report = evaluate_detection(flags, poison_indices, scores, nu, spec.method)
    logger.debug(
        "%s flagged %d of %d rows (recall %.3f)", spec.method, int(flags.sum()), len(flags), report.recall
    )
    return report


def remove_flagged(ds: Dataset, report: DetectionReport) -> Dataset:
    """The training set with flagged rows removed"""
    return ds.subset(np.flatnonzero(~report.flags))
