"""Classification metrics and their CSV tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def confusion_matrix(labels, preds, classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def precision_recall(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class precision and recall; 0 where a class is never predicted or absent."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    return precision, recall


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pr_curve(labels, scores: np.ndarray, cls: int) -> list[tuple[float, float, float]]:
    """One-vs-rest (threshold, precision, recall) points for class ``cls``,
    one per distinct score, highest threshold first."""
    labels = np.asarray(labels)
    s = scores[:, cls]
    positives = int(np.sum(labels == cls))
    points = []
    for t in np.unique(s)[::-1]:
        hit = s >= t
        tp = int(np.sum(hit & (labels == cls)))
        precision = tp / int(hit.sum())
        recall = tp / positives if positives else 0.0
        points.append((float(t), precision, recall))
    return points


@dataclass
class MetricsReport:
    accuracy: float
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    curves: dict = field(default_factory=dict)     # class -> [(threshold, precision, recall)]
    extra: dict = field(default_factory=dict)      # e.g. single-modality diagnostics

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels, classes: int, **extra) -> "MetricsReport":
        labels = np.asarray(labels)
        preds = np.argmax(logits, axis=1)
        cm = confusion_matrix(labels, preds, classes)
        precision, recall = precision_recall(cm)
        scores = softmax(np.asarray(logits, dtype=np.float64))
        curves = {c: pr_curve(labels, scores, c) for c in range(classes)}
        acc = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
        return cls(acc, cm, precision, recall, curves, dict(extra))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["accuracy", repr(self.accuracy)])
            for name, value in self.extra.items():
                w.writerow([name, repr(value)])
            for c, (p, r) in enumerate(zip(self.precision, self.recall)):
                w.writerow([f"precision_{c}", repr(float(p))])
                w.writerow([f"recall_{c}", repr(float(r))])
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + list(range(len(self.confusion))))
            for c, row in enumerate(self.confusion):
                w.writerow([c] + [int(x) for x in row])
        with open(out / "pr.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "threshold", "precision", "recall"])
            for c, points in self.curves.items():
                for t, p, r in points:
                    w.writerow([c, repr(t), repr(p), repr(r)])


def read_metrics(path) -> dict[str, float]:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    with open(path, newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}
