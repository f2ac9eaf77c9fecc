"""Confusion matrix, ACA, one-vs-rest macro-F1, ROC and AUC."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes):
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
        return cls(counts)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise MetricError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricError("confusion matrix entries must be nonnegative")

    @property
    def total(self):
        return int(self.counts.sum())

    def write_csv(self, path):
        k = self.counts.shape[0]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["true\\pred"] + [str(j) for j in range(k)])
            for i in range(k):
                out.writerow([i] + [int(v) for v in self.counts[i]])


def _as_counts(cm):
    return cm.counts if isinstance(cm, ConfusionMatrix) else ConfusionMatrix(cm).counts


def aca(cm):
    """Average of per-class accuracies (diagonal over row sums)."""
    counts = _as_counts(cm)
    rows = counts.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise MetricError(f"per-class accuracy undefined: no samples of class(es) {empty.tolist()}")
    return float(np.mean(np.diag(counts) / rows))


def per_class_f1(cm):
    counts = _as_counts(cm).astype(float)
    tp = np.diag(counts)
    cols = counts.sum(axis=0)
    rows = counts.sum(axis=1)
    precision = np.divide(tp, cols, out=np.zeros_like(tp), where=cols > 0)
    recall = np.divide(tp, rows, out=np.zeros_like(tp), where=rows > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm):
    """Unweighted mean of one-vs-rest F1; a class with P + R = 0 scores 0."""
    return float(np.mean(per_class_f1(cm)))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    class_id: int | None = None

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def roc_auc(scores, labels, class_id=None):
    """ROC over every distinct score threshold (descending) and its trapezoid area.

    The first point uses threshold +inf so the curve starts at (0, 0).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both positive and negative labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = (last_of_run + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, class_id), auc


def one_vs_rest_auc(probabilities, labels):
    """Per-class AUCs as ``{class: auc or None}``; ``None`` marks a skipped class."""
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise MetricError(f"probabilities {probs.shape} do not match {labels.shape[0]} labels")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise MetricError("probability rows must sum to 1")
    out = {}
    for k in range(probs.shape[1]):
        positives = labels == k
        if positives.all() or not positives.any():
            warnings.warn(f"class {k} is absent (or alone) in labels; skipped in AUC", stacklevel=2)
            out[k] = None
            continue
        out[k] = roc_auc(probs[:, k], positives, class_id=k)[1]
    return out


def multiclass_auc(probabilities, labels):
    """Macro average of one-vs-rest AUCs over the classes present."""
    vals = [v for v in one_vs_rest_auc(probabilities, labels).values() if v is not None]
    if not vals:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean(vals))


def roc_curves(probabilities, labels):
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    curves = []
    for k in range(probs.shape[1]):
        positives = labels == k
        if positives.any() and not positives.all():
            curves.append(roc_auc(probs[:, k], positives, class_id=k)[0])
    return curves


def write_roc_csv(path, curves):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["class", "threshold", "fpr", "tpr"])
        for curve in curves:
            for fpr, tpr, thr in curve.points():
                out.writerow([curve.class_id, repr(thr), repr(fpr), repr(tpr)])


def summarize(probabilities, labels, num_classes):
    """Every evaluation metric for class probabilities; returns a JSON-ready dict."""
    probs = np.asarray(probabilities, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    cm = ConfusionMatrix.from_predictions(labels, probs.argmax(axis=1), num_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_class = one_vs_rest_auc(probs, labels)
    present = [v for v in per_class.values() if v is not None]
    return {
        "aca": aca(cm),
        "macro_f1": macro_f1(cm),
        "auc": float(np.mean(present)) if present else float("nan"),
        "per_class_f1": per_class_f1(cm).tolist(),
        "per_class_auc": {str(k): v for k, v in per_class.items()},
        "auc_skipped_classes": [k for k, v in per_class.items() if v is None],
        "confusion_matrix": cm.counts.tolist(),
        "n": int(labels.size),
    }
