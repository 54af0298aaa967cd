"""Classification metrics with a documented macro-F1 convention.

Per-class F1 is ``2PR / (P + R)`` with ``0/0 -> 0``. A class that is neither
present in the labels nor ever predicted is left out of the macro mean; a
class missing from only one side scores F1 = 0 and stays in.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    confusion: np.ndarray
    sample_count: int
    included_classes: list

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
            "confusion": self.confusion.tolist(),
            "sample_count": self.sample_count,
            "included_classes": list(self.included_classes),
        }


def _validate(preds, labels, class_count):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("metrics need at least one sample")
    if class_count is None:
        class_count = int(max(preds.max(), labels.max())) + 1
    for arr, what in ((preds, "predictions"), (labels, "labels")):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValueError(f"{what} outside [0, {class_count})")
    return preds, labels, class_count


def confusion_matrix(preds, labels, class_count=None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds, labels, k = _validate(preds, labels, class_count)
    return np.bincount(labels * k + preds, minlength=k * k).reshape(k, k)


def f1_from_confusion(cm: np.ndarray):
    """Per-class F1 and the mask of classes included in the macro mean."""
    tp = np.diag(cm).astype(np.float64)
    true_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    denom = true_count + pred_count
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, denom > 0


def _exact_macro(cm: np.ndarray) -> float:
    tp = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0)
    scores = [Fraction(2 * int(t), int(d)) for t, d in zip(tp, denom) if d > 0]
    return float(sum(scores, Fraction(0)) / len(scores))


def macro_f1(preds, labels, class_count=None):
    """Return ``(macro_f1, per_class_f1)``."""
    cm = confusion_matrix(preds, labels, class_count)
    f1, _ = f1_from_confusion(cm)
    return _exact_macro(cm), f1


def classification_report(preds, labels, class_count=None) -> MetricsReport:
    cm = confusion_matrix(preds, labels, class_count)
    f1, included = f1_from_confusion(cm)
    n = int(cm.sum())
    return MetricsReport(accuracy=float(np.trace(cm) / n), macro_f1=_exact_macro(cm),
                         per_class_f1=f1.tolist(), confusion=cm, sample_count=n,
                         included_classes=np.flatnonzero(included).tolist())
