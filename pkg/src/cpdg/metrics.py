"""Ranking and classification metrics for downstream evaluation."""

from __future__ import annotations

import numpy as np


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative example")
    return scores, labels


def _average_ranks(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.concatenate([[True], xs[1:] != xs[:-1], [True]])
    starts = np.nonzero(boundaries)[0]
    avg = (starts[:-1] + starts[1:] - 1) / 2.0 + 1.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, np.diff(starts))
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count one half)."""
    scores, labels = _check(scores, labels)
    ranks = _average_ranks(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over distinct score thresholds of recall increment times precision."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.nonzero(np.concatenate([s[1:] != s[:-1], [True]]))[0]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


def micro_f1(scores, labels, threshold: float = 0.5) -> float:
    """Micro-averaged F1 over both classes at ``threshold``; equals accuracy for binary labels."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    pred = scores >= threshold
    tp = np.sum(pred & labels) + np.sum(~pred & ~labels)
    fp = np.sum(pred & ~labels) + np.sum(~pred & labels)
    fn = fp  # every miss for one class is a false alarm for the other
    return float(2 * tp / (2 * tp + fp + fn)) if len(labels) else 0.0


def evaluate(task: str, predictions, ground_truth) -> dict:
    """AUC / AP / micro-F1 for probabilities ``predictions`` against binary ``ground_truth``."""
    if task not in ("link-prediction", "node-classification"):
        raise ValueError(f"unknown task {task!r}")
    return {"task": task, "auc": roc_auc(predictions, ground_truth), "ap": average_precision(predictions, ground_truth),
            "micro_f1": micro_f1(predictions, ground_truth)}
