"""Confusion matrix, accuracy and unweighted average (macro) F1."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    confusion: np.ndarray  # confusion[i, j] = count of true i predicted j
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    count: int

    def to_dict(self, labels=None) -> dict:
        n = self.confusion.shape[0]
        labels = list(labels) if labels is not None else [str(i) for i in range(n)]
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "count": self.count,
            "per_class": {
                labels[i]: {
                    "precision": float(self.precision[i]),
                    "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]),
                    "support": int(self.confusion[i].sum()),
                }
                for i in range(n)
            },
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def from_confusion(cm: np.ndarray) -> Metrics:
    """Derive metrics; classes with no support and no predictions score F1 = 0."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * tp, predicted + actual)
    total = int(cm.sum())
    accuracy = float(tp.sum() / total) if total else 0.0
    return Metrics(cm, accuracy, float(f1.mean()), precision, recall, f1, total)


def compute_metrics(y_true, y_pred, n_classes: int = 7) -> Metrics:
    return from_confusion(confusion_matrix(y_true, y_pred, n_classes))


def confusion_csv(cm: np.ndarray, labels) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *labels])
    for name, row in zip(labels, cm):
        writer.writerow([name, *(int(x) for x in row)])
    return buf.getvalue()
