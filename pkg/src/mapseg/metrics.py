"""Confusion-matrix accumulation and per-class precision / recall / F1.

Rows index the true class, columns the predicted class.  Averages are
unweighted (macro) means over the three classes.  Zero denominators yield
a score of 0 together with a degenerate flag so sparse test tiles never
crash an evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch

CLASS_NAMES = ("background", "building", "road")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeMismatch("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @classmethod
    def zeros(cls, k: int = 3) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.k != other.k:
            raise ShapeMismatch("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(
    cm: ConfusionMatrix,
    predicted: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray | None = None,
) -> ConfusionMatrix:
    """Return a new matrix with per-pixel (truth, predicted) tallies added."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeMismatch(f"prediction {predicted.shape} vs truth {truth.shape}")
    if mask is not None:
        if mask.shape != truth.shape:
            raise ShapeMismatch("mask shape differs from rasters")
        predicted = predicted[mask]
        truth = truth[mask]
    p = predicted.ravel().astype(np.int64)
    t = truth.ravel().astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= cm.k or t.min() < 0 or t.max() >= cm.k):
        raise LabelOutOfRange(f"labels outside [0, {cm.k})")
    counts = cm.counts.copy()
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassScores:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    avg_precision: float
    avg_recall: float
    avg_f1: float
    degenerate: tuple[bool, ...]  # per class: some denominator was zero


def scores(cm: ConfusionMatrix) -> ClassScores:
    """precision_k = cm[k,k] / column_k, recall_k = cm[k,k] / row_k,
    f1_k = harmonic mean; zero denominators give 0 and set the flag."""
    diag = np.diag(cm.counts).astype(np.float64)
    col = cm.counts.sum(axis=0).astype(np.float64)
    row = cm.counts.sum(axis=1).astype(np.float64)
    precision, recall, f1, degenerate = [], [], [], []
    for k in range(cm.k):
        deg = False
        if col[k] > 0:
            p = diag[k] / col[k]
        else:
            p, deg = 0.0, True
        if row[k] > 0:
            r = diag[k] / row[k]
        else:
            r, deg = 0.0, True
        if p + r > 0:
            f = 2.0 * p * r / (p + r)
        else:
            f, deg = 0.0, True
        precision.append(p)
        recall.append(r)
        f1.append(f)
        degenerate.append(deg)
    return ClassScores(
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        avg_precision=float(np.mean(precision)),
        avg_recall=float(np.mean(recall)),
        avg_f1=float(np.mean(f1)),
        degenerate=tuple(degenerate),
    )


def scores_to_dict(cs: ClassScores, class_names: tuple[str, ...] = CLASS_NAMES) -> dict:
    per_class = {
        name: {"precision": cs.precision[i], "recall": cs.recall[i], "f1": cs.f1[i], "degenerate": cs.degenerate[i]}
        for i, name in enumerate(class_names)
    }
    return {
        "per_class": per_class,
        "average": {"precision": cs.avg_precision, "recall": cs.avg_recall, "f1": cs.avg_f1},
    }


def write_scores_json(cs: ClassScores, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scores_to_dict(cs), indent=2, sort_keys=True) + "\n")


def format_scores_table(cs: ClassScores, class_names: tuple[str, ...] = CLASS_NAMES) -> str:
    """Aligned text table: one row per class plus the macro average."""
    header = f"{'class':<12} {'precision':>9} {'recall':>9} {'f1':>9}"
    lines = [header, "-" * len(header)]
    for i, name in enumerate(class_names):
        star = "*" if cs.degenerate[i] else " "
        lines.append(f"{name:<12} {cs.precision[i]:>9.3f} {cs.recall[i]:>9.3f} {cs.f1[i]:>9.3f}{star}")
    lines.append(f"{'average':<12} {cs.avg_precision:>9.3f} {cs.avg_recall:>9.3f} {cs.avg_f1:>9.3f}")
    return "\n".join(lines)
