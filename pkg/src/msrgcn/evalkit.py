"""Classification metrics: confusion matrix, macro one-vs-rest AUC, quadratic-weighted kappa."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def predict(scores) -> np.ndarray:
    """Argmax per row; ``np.argmax`` resolves ties toward the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


def confusion(preds, labels, k: int) -> np.ndarray:
    """Counts indexed ``[truth, prediction]``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} outside 0..{k - 1}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def qw_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError("confusion matrix must be square with at least 2 classes")
    n = cm.sum()
    if n <= 0:
        raise ValueError("empty confusion matrix")
    k = cm.shape[0]
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    denom = (w * expected).sum()
    if denom == 0:
        return 1.0 if (w * cm).sum() == 0 else 0.0
    return float(1.0 - (w * cm).sum() / denom)


def binary_auc(scores, positive) -> float:
    """Rank-sum AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(labels, scores) -> tuple[float, list[float | None]]:
    """Mean one-vs-rest AUC over classes that have both positives and negatives.

    Returns ``(macro, per_class)`` with ``None`` for excluded classes.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape[0] < 2:
        raise ValueError("AUC needs at least 2 samples")
    per_class: list[float | None] = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            per_class.append(None)
        else:
            per_class.append(binary_auc(scores[:, c], pos))
    valid = [a for a in per_class if a is not None]
    if not valid:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(valid)), per_class


@dataclass
class MetricsReport:
    macro_auc: float | None
    per_class_auc: list[float | None]
    qw_kappa: float
    confusion: list[list[int]]
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "macro_auc": self.macro_auc,
            "per_class_auc": self.per_class_auc,
            "qw_kappa": self.qw_kappa,
            "confusion": self.confusion,
            "accuracy": self.accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(labels, scores) -> MetricsReport:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    cm = confusion(predict(scores), labels, k)
    try:
        macro, per_class = macro_auc(labels, scores)
    except ValueError:
        macro, per_class = None, [None] * k
    return MetricsReport(
        macro_auc=macro,
        per_class_auc=per_class,
        qw_kappa=qw_kappa(cm),
        confusion=cm.tolist(),
        accuracy=float(np.trace(cm) / cm.sum()),
    )
