"""Classification metrics and the detection-latency model.

Zero-denominator precision/recall/F1 are defined as 0. Classes that appear
neither in the labels nor in the predictions are left out of the macro
averages; every other class counts, which means a class that is never
predicted drags the macro scores down.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from laeids.errors import ClassOutOfRange, EmptyMatrix, LengthMismatch, ZeroRate


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[true, predicted]
    class_names: tuple = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, labels, C: int, class_names=()) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.size < 1:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} labels")
    if p.min() < 0 or y.min() < 0 or p.max() >= C or y.max() >= C:
        raise ClassOutOfRange(f"class index outside [0, {C})")
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    names = tuple(class_names) or tuple(str(i) for i in range(C))
    return ConfusionMatrix(counts, names)


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list
    recall: list
    f1: list
    confusion: ConfusionMatrix
    included_classes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]}
                for i, name in enumerate(self.confusion.class_names)
            },
            "confusion": self.confusion.counts.tolist(),
            "class_names": list(self.confusion.class_names),
            "macro_classes": [self.confusion.class_names[i] for i in self.included_classes],
            "n": self.confusion.total,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    M = cm.counts
    total = int(M.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    tp = np.diag(M).astype(float)
    pred = M.sum(axis=0).astype(float)
    true = M.sum(axis=1).astype(float)
    prec = [_safe_div(tp[i], pred[i]) for i in range(len(tp))]
    rec = [_safe_div(tp[i], true[i]) for i in range(len(tp))]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(prec, rec)]
    inc = [i for i in range(len(tp)) if pred[i] > 0 or true[i] > 0]
    mean = lambda xs: float(sum(xs[i] for i in inc) / len(inc))
    return MetricsReport(float(tp.sum() / total), mean(prec), mean(rec), mean(f1), prec, rec, f1, cm, inc)


def evaluate(predictions, labels, class_names) -> MetricsReport:
    return metrics(confusion(predictions, labels, len(class_names), class_names))


@dataclass(frozen=True)
class LatencyModel:
    labeling_rate: float  # labels per hour
    n_labels: int
    t_training: float = 0.0  # hours

    def __post_init__(self):
        if self.labeling_rate < 0 or self.n_labels < 0 or self.t_training < 0:
            raise ValueError("latency model values must be nonnegative")

    @property
    def t_labeling(self) -> float:
        if self.labeling_rate <= 0:
            raise ZeroRate("labeling rate must be positive")
        return self.n_labels / self.labeling_rate


def detection_latency(m: LatencyModel) -> float:
    """Hours from meeting a new threat to detecting it: labeling plus training time."""
    return m.t_labeling + m.t_training
