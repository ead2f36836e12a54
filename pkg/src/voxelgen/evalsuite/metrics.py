"""Multi-label AUC and precision with macro / weighted averaging."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .fid import MetricError


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2)
                 / (n_pos * n_neg))


def _per_class(scores: np.ndarray, labels: np.ndarray):
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    if scores.shape != labels.shape:
        raise MetricError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    return scores, labels


def auc(scores: np.ndarray, labels: np.ndarray, mode: str = "macro"
        ) -> tuple[float, list[int]]:
    """Multi-label AUC. Classes without both a positive and a negative sample
    are skipped; their indices are returned alongside the score. Weighted mode
    weights by class positive count."""
    scores, labels = _per_class(scores, labels)
    values, weights, skipped = [], [], []
    for k in range(scores.shape[1]):
        col = labels[:, k]
        if col.sum() == 0 or col.sum() == len(col):
            skipped.append(k)
            continue
        values.append(binary_auc(scores[:, k], col))
        weights.append(float(col.sum()))
    if not values:
        raise MetricError("no class has both positives and negatives")
    if mode == "macro":
        return float(np.mean(values)), skipped
    if mode == "weighted":
        return float(np.average(values, weights=weights)), skipped
    raise MetricError(f"unknown mode {mode!r}")


def precision(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
              mode: str = "macro") -> tuple[float, list[int]]:
    """Multi-label precision at a threshold. A class with no predicted
    positives contributes 0. Class-inclusion and weighting rules match auc."""
    scores, labels = _per_class(scores, labels)
    values, weights, skipped = [], [], []
    for k in range(scores.shape[1]):
        col = labels[:, k]
        if col.sum() == 0 or col.sum() == len(col):
            skipped.append(k)
            continue
        pred = scores[:, k] > threshold
        tp = int(np.sum(pred & (col == 1)))
        fp = int(np.sum(pred & (col == 0)))
        values.append(tp / (tp + fp) if tp + fp > 0 else 0.0)
        weights.append(float(col.sum()))
    if not values:
        raise MetricError("no class has both positives and negatives")
    if mode == "macro":
        return float(np.mean(values)), skipped
    if mode == "weighted":
        return float(np.average(values, weights=weights)), skipped
    raise MetricError(f"unknown mode {mode!r}")
