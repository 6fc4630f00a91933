"""Evaluation metrics: RMSE, ROC-AUC and correlation coefficients."""

from __future__ import annotations

import numpy as np

from .errors import MetricError


def rankdata(x):
    """Ranks starting at 1, ties receive the average of their ranks."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], len(x)]
    ranks = np.empty(len(x))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    return ranks


def rmse(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size == 0:
        raise MetricError(f"RMSE needs two equal non-empty vectors, got {pred.shape} and {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y) or len(x) < 2:
        raise MetricError("correlation needs two equal vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise MetricError("correlation is undefined for a constant vector")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def spearman(x, y):
    return pearson(rankdata(x), rankdata(y))


def pairwise_gaps(embeddings, labels):
    """Embedding L2 distance and absolute label difference over unordered pairs."""
    E = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if E.ndim != 2 or E.shape[0] != len(y):
        raise MetricError(f"{E.shape} embeddings do not match {len(y)} labels")
    if len(y) < 2:
        raise MetricError("correlation analysis needs at least two points")
    i, j = np.triu_indices(len(y), k=1)
    return np.linalg.norm(E[i] - E[j], axis=1), np.abs(y[i] - y[j])


def correlation_analysis(embeddings, labels):
    """Spearman and Pearson coefficients of embedding distance vs label gap."""
    dist, gap = pairwise_gaps(embeddings, labels)
    return spearman(dist, gap), pearson(dist, gap)
