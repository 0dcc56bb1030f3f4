"""Evaluation metrics: accuracy, macro-F1, worst-group accuracy.

Decisions are argmax over the predicted simplex. F1 uses the 0/0 -> 0
convention; worst-group skips empty groups.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError

METRICS = ("accuracy", "macro_f1", "worst_group_accuracy")


def accuracy(pred_labels, labels) -> float:
    return float((np.asarray(pred_labels) == np.asarray(labels)).mean())


def macro_f1(pred_labels, labels, n_classes: int) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(labels)
    scores = []
    for c in range(n_classes):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores))


def worst_group_accuracy(pred_labels, labels, groups) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(labels)
    grp = np.asarray(groups)
    worst = None
    for g in np.unique(grp):
        members = grp == g
        acc = float((pred[members] == true[members]).mean())
        worst = acc if worst is None else min(worst, acc)
    return worst


def compute_metric(pred_probs, labels, groups, metric: str) -> float:
    """Score argmax decisions of simplex predictions against labels."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.size == 0 or len(labels) == 0:
        raise ContractError("compute_metric needs non-empty predictions")
    if probs.shape[0] != len(labels):
        raise ContractError(f"{probs.shape[0]} predictions vs {len(labels)} labels")
    pred = probs.argmax(axis=1)
    if metric == "accuracy":
        return accuracy(pred, labels)
    if metric == "macro_f1":
        return macro_f1(pred, labels, probs.shape[1])
    if metric == "worst_group_accuracy":
        if groups is None or len(groups) != len(labels):
            raise ContractError("worst_group_accuracy needs aligned groups")
        return worst_group_accuracy(pred, labels, groups)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
