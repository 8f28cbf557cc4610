"""Accuracy, per-group accuracy and macro F1."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError


def per_group_accuracy(predictions, labels, groups, n_groups=None) -> list:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if not (predictions.shape == labels.shape == groups.shape):
        raise ConfigurationError("predictions, labels and groups must have equal length")
    n_groups = int(groups.max()) + 1 if n_groups is None else n_groups
    out = []
    for g in range(n_groups):
        sel = groups == g
        if not sel.any():
            raise ConfigurationError(f"group {g} is empty")
        out.append(float((predictions[sel] == labels[sel]).mean()))
    return out


def macro_f1(predictions, labels, num_classes=None) -> float:
    """Unweighted mean of per-class F1; a 0/0 precision or recall counts as 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    K = num_classes or int(max(predictions.max(), labels.max())) + 1
    scores = []
    for c in range(K):
        tp = np.sum((predictions == c) & (labels == c))
        n_pred = np.sum(predictions == c)
        n_true = np.sum(labels == c)
        prec = tp / n_pred if n_pred else 0.0
        rec = tp / n_true if n_true else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(scores))


def metrics(predictions, labels, groups, num_classes=None) -> dict:
    """Average accuracy, per-group accuracy over all 2C groups, worst group, macro F1."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ConfigurationError("no predictions to score")
    K = num_classes or int(max(predictions.max(), labels.max())) + 1
    pg = per_group_accuracy(predictions, labels, groups, 2 * K)
    return {
        "accuracy": float((predictions == labels).mean()),
        "per_group": pg,
        "worst_group": min(pg),
        "macro_f1": macro_f1(predictions, labels, K),
    }
