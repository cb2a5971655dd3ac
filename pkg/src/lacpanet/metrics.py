"""One-vs-rest AUC and support-weighted precision / recall / F1."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def predict_class(probs) -> int:
    """Argmax with ties resolved toward the lowest class index."""
    return int(np.argmax(np.asarray(probs)))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney estimate of ROC AUC; tied scores get midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative case")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return float(a / b) if b else 0.0


@dataclass
class ClassMetrics:
    support: int
    auc: float | None
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    weighted_auc: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    per_class: list[ClassMetrics]
    confusion: np.ndarray
    auc_excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "weighted_auc": self.weighted_auc,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "auc_excluded_classes": list(self.auc_excluded),
            "per_class": [vars(c) for c in self.per_class],
            "confusion": self.confusion.tolist(),
        }

    def table(self, names=None) -> str:
        lines = [f"{'class':<18s}{'support':>8s}{'AUC':>9s}{'prec':>9s}{'recall':>9s}{'F1':>9s}"]
        for i, c in enumerate(self.per_class):
            name = names[i] if names else str(i)
            auc = "   n/a" if c.auc is None else f"{c.auc:9.4f}"
            lines.append(f"{name:<18s}{c.support:>8d}{auc:>9s}{c.precision:9.4f}{c.recall:9.4f}{c.f1:9.4f}")
        lines.append(f"{'weighted':<18s}{sum(c.support for c in self.per_class):>8d}"
                     f"{self.weighted_auc:9.4f}{self.weighted_precision:9.4f}"
                     f"{self.weighted_recall:9.4f}{self.weighted_f1:9.4f}")
        return "\n".join(lines)


def compute_metrics(labels, probs, n_classes: int | None = None) -> MetricsReport:
    """Metric battery over ``probs[n_cases, n_classes]`` and integer ``labels``.

    Classes without both positives and negatives are left out of the
    weighted AUC and listed in ``auc_excluded``.
    """
    labels = np.asarray(labels, dtype=int)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty case list")
    n_classes = probs.shape[1] if n_classes is None else n_classes
    preds = np.array([predict_class(p) for p in probs])
    cm = confusion_matrix(labels, preds, n_classes)
    per_class, excluded = [], []
    auc_num = auc_den = 0.0
    for c in range(n_classes):
        support = int(cm[c].sum())
        tp = cm[c, c]
        precision = _safe_div(tp, cm[:, c].sum())
        recall = _safe_div(tp, support)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        positive = labels == c
        auc = None
        if positive.any() and not positive.all():
            auc = binary_auc(probs[:, c], positive)
            auc_num += support * auc
            auc_den += support
        else:
            excluded.append(c)
        per_class.append(ClassMetrics(support, auc, precision, recall, f1))
    total = labels.size
    w = np.array([pc.support for pc in per_class], dtype=np.float64) / total
    return MetricsReport(
        weighted_auc=_safe_div(auc_num, auc_den),
        weighted_precision=float(w @ [pc.precision for pc in per_class]),
        weighted_recall=float(w @ [pc.recall for pc in per_class]),
        weighted_f1=float(w @ [pc.f1 for pc in per_class]),
        accuracy=float(np.trace(cm) / total),
        per_class=per_class,
        confusion=cm,
        auc_excluded=excluded,
    )
