"""Classification metrics: confusion matrix, top-1 accuracy, one-vs-rest AUC."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .candata import CLASS_NAMES, Label

NUM_CLASSES = len(Label)


def confusion_matrix(y_true, y_pred, num_classes=NUM_CLASSES):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(y_true == np.asarray(y_pred)))


def per_class_accuracy(cm):
    """Fraction of each true class predicted correctly; None for absent classes."""
    rows = cm.sum(axis=1)
    return [None if rows[k] == 0 else float(cm[k, k] / rows[k]) for k in range(cm.shape[0])]


def binary_auc(is_positive, scores):
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    pos = np.asarray(is_positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(y_true, probs):
    """Mean one-vs-rest AUC over the classes present (with at least one negative too)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    areas = []
    for k in range(probs.shape[1]):
        pos = y_true == k
        if not pos.any() or pos.all():
            warnings.warn(f"class {CLASS_NAMES.get(k, k)} absent or alone; excluded from macro AUC", stacklevel=2)
            continue
        areas.append(binary_auc(pos, probs[:, k]))
    if not areas:
        return float("nan")
    return float(np.mean(areas))


@dataclass
class EvalReport:
    confusion: np.ndarray
    accuracy: float
    auc_macro: float
    per_class_accuracy: list
    items_per_second_train: float | None = None
    items_per_second_infer: float | None = None

    @property
    def count(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "count": self.count,
            "accuracy": self.accuracy,
            "auc_macro": self.auc_macro,
            "per_class_accuracy": {CLASS_NAMES[k]: v for k, v in enumerate(self.per_class_accuracy)},
            "confusion": self.confusion.tolist(),
            "items_per_second_train": self.items_per_second_train,
            "items_per_second_infer": self.items_per_second_infer,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        per = [d["per_class_accuracy"][CLASS_NAMES[k]] for k in range(NUM_CLASSES)]
        return cls(np.array(d["confusion"], dtype=np.int64), d["accuracy"], d["auc_macro"], per,
                   d.get("items_per_second_train"), d.get("items_per_second_infer"))

    def table(self):
        names = [CLASS_NAMES[k] for k in range(NUM_CLASSES)]
        w = max(len(n) for n in names) + 2
        lines = [f"windows: {self.count}   accuracy: {self.accuracy:.5f}   macro AUC: {self.auc_macro:.5f}", ""]
        lines.append("true \\ pred".ljust(w) + "".join(n[:w - 1].rjust(w) for n in names) + "  class acc".rjust(11))
        for k, n in enumerate(names):
            acc = self.per_class_accuracy[k]
            acc_s = "-" if acc is None else f"{acc:.5f}"
            lines.append(n.ljust(w) + "".join(str(v).rjust(w) for v in self.confusion[k]) + acc_s.rjust(11))
        for label, v in (("train batches/s", self.items_per_second_train), ("infer batches/s", self.items_per_second_infer)):
            if v is not None:
                lines.append(f"{label}: {v:.2f}")
        return "\n".join(lines)


def report_from_scores(y_true, probs):
    y_pred = np.argmax(probs, axis=1)  # ties resolve to the lowest class index
    cm = confusion_matrix(y_true, y_pred, probs.shape[1])
    return EvalReport(cm, accuracy(y_true, y_pred), macro_auc(y_true, probs), per_class_accuracy(cm))
