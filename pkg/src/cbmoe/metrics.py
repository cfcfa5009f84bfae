"""Evaluation metrics: macro-averaged F1 with per-class tables, and
rank-based AUROC for concept activations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


def per_class_scores(predictions, labels, num_classes: int) -> list[ClassScores]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    out = []
    for c in range(num_classes):
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        out.append(ClassScores(precision=precision, recall=recall, f1=f1,
                               support=tp + fn, predicted=tp + fp))
    return out


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1. Classes that appear neither in the
    labels nor in the predictions are excluded from the mean."""
    scores = per_class_scores(predictions, labels, num_classes)
    active = [s.f1 for s in scores if s.support > 0 or s.predicted > 0]
    if not active:
        raise ValueError("no class has support or predictions")
    return float(np.mean(active))


def concept_auroc(scores, targets, mask=None) -> float | None:
    """Mann-Whitney AUROC of scores against binary targets; ties get half
    credit. Returns None unless both classes appear among observed items."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if mask is not None:
        keep = np.asarray(mask) > 0
        scores, targets = scores[keep], targets[keep]
    pos = scores[targets > 0.5]
    neg = scores[targets <= 0.5]
    if len(pos) == 0 or len(neg) == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))
