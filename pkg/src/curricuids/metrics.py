"""Confusion-matrix metrics at a decision threshold."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatch

DEFAULT_THRESHOLD = 0.5


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    threshold: float = DEFAULT_THRESHOLD
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def summary(self) -> str:
        return (f"accuracy {100 * self.accuracy:.2f}%  precision {100 * self.precision:.2f}%  "
                f"recall {100 * self.recall:.2f}%  f1 {100 * self.f1:.2f}%")


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int,
                        threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    pp, ap = tp + fp, tp + fn
    n = tp + fp + fn + tn
    precision = tp / pp if pp else 0.0
    recall = tp / ap if ap else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    accuracy = (tp + tn) / n if n else 0.0
    return MetricsReport(int(tp), int(fp), int(fn), int(tn), precision, recall, f1, accuracy,
                         float(threshold), pp == 0, ap == 0)


def compute_metrics(probabilities, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape[0]} probabilities vs {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return metrics_from_counts(tp, fp, fn, tn, threshold)
