"""Classification metrics: accuracy, confusion matrices, one-vs-rest SEN/SPE/AUC, ROC export.

Metrics that are undefined on the given data (e.g. sensitivity for a class
with no positive samples) are reported as ``None``, never as 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CLASSES, NUM_CLASSES

UNDEFINED = None


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(preds == labels)) / labels.size


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty_rows(self) -> list[int]:
        return [i for i, s in enumerate(self.counts.sum(axis=1)) if s == 0]

    def row_normalize(self) -> np.ndarray:
        """Each non-empty row divided by its sum; empty rows stay zero (see ``empty_rows``)."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        nz = sums[:, 0] > 0
        out[nz] = self.counts[nz] / sums[nz]
        return out


def confusion(preds, labels, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contain a class outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        counts[t, p] += 1
    return ConfusionMatrix(counts)


def sen_spe(cm: ConfusionMatrix, k: int):
    """One-vs-rest (sensitivity, specificity) for class ``k``; ``None`` when undefined."""
    c = cm.counts
    tp = int(c[k, k])
    fn = int(c[k].sum()) - tp
    fp = int(c[:, k].sum()) - tp
    tn = int(c.sum()) - tp - fn - fp
    sen = tp / (tp + fn) if tp + fn else UNDEFINED
    spe = tn / (tn + fp) if tn + fp else UNDEFINED
    return sen, spe


def _binary(scores, labels, k):
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == k
    if scores.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    return scores, pos


def _rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_ovr(scores, labels, k: int):
    """P(score of random positive > score of random negative), ties counted 1/2.

    Computed from the Mann-Whitney rank sum; ``None`` if class ``k`` has no
    positives or no negatives.
    """
    scores, pos = _binary(scores, labels, k)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = _rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels, k: int):
    """(thresholds, fpr, tpr) with one point per distinct score, descending.

    The first point is (0, 0) at threshold +inf; the last is (1, 1).
    Returns ``None`` under the same conditions as :func:`auc_ovr`.
    """
    scores, pos = _binary(scores, labels, k)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        above = scores >= t
        tpr.append(np.count_nonzero(above & pos) / n_pos)
        fpr.append(np.count_nonzero(above & ~pos) / n_neg)
    return np.concatenate([[np.inf], thresholds]), np.array(fpr), np.array(tpr)


def roc_points(scores, labels, k: int):
    curve = roc_curve(scores, labels, k)
    if curve is None:
        return UNDEFINED
    _, fpr, tpr = curve
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class EvalReport:
    accuracy: float
    auc: list
    sensitivity: list
    specificity: list
    macro_auc: float | None
    confusion: ConfusionMatrix
    roc: list = field(default_factory=list)  # per class: (thresholds, fpr, tpr) or None
    n_samples: int = 0

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_auc": self.macro_auc,
            "n_samples": self.n_samples,
            "classes": list(CLASSES),
            "per_class": {
                name: {"auc": self.auc[i], "sensitivity": self.sensitivity[i], "specificity": self.specificity[i]}
                for i, name in enumerate(CLASSES)
            },
            "confusion": self.confusion.counts.tolist(),
            "confusion_normalized": self.confusion.row_normalize().tolist(),
            "confusion_empty_rows": self.confusion.empty_rows,
            "roc": {
                name: None if c is None else [[f, t] for f, t in zip(c[1].tolist(), c[2].tolist())]
                for name, c in zip(CLASSES, self.roc)
            },
        }

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "threshold", "fpr", "tpr"])
            for name, c in zip(CLASSES, self.roc):
                if c is None:
                    continue
                for t, f, r in zip(*c):
                    w.writerow([name, repr(float(t)), repr(float(f)), repr(float(r))])

    def write_confusion_csv(self, path, normalized: bool = False) -> None:
        mat = self.confusion.row_normalize() if normalized else self.confusion.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *CLASSES])
            for name, row in zip(CLASSES, mat.tolist()):
                w.writerow([name, *[repr(v) for v in row]])


def evaluate(probs: np.ndarray, labels) -> EvalReport:
    """Full report from per-sample class probabilities (N x 6) and true labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.argmax(probs, axis=1)
    cm = confusion(preds, labels)
    aucs, sens, spes, rocs = [], [], [], []
    for k in range(NUM_CLASSES):
        aucs.append(auc_ovr(probs[:, k], labels, k))
        s, p = sen_spe(cm, k)
        sens.append(s)
        spes.append(p)
        rocs.append(roc_curve(probs[:, k], labels, k))
    defined = [a for a in aucs if a is not None]
    macro = float(np.mean(defined)) if defined else UNDEFINED
    return EvalReport(accuracy(preds, labels), aucs, sens, spes, macro, cm, rocs, int(labels.size))


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
