"""Confusion-matrix statistics and one-vs-rest ROC analysis.

Rows of a confusion matrix are true classes and columns are predictions.
Per-class quantities that have a zero denominator are reported as NaN and
left out of the macro averages, with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "ClassReport",
    "RocCurve",
    "EvalReport",
    "confusion",
    "classwise",
    "f1_score",
    "roc_auc_ovr",
    "predict_labels",
    "evaluate_scores",
]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        K = self.num_classes
        lines = ["true\\pred," + ",".join(str(j) for j in range(K))]
        for i in range(K):
            lines.append(f"{i}," + ",".join(str(int(v)) for v in self.counts[i]))
        return "\n".join(lines) + "\n"


def confusion(true: Sequence[int], pred: Sequence[int], num_classes: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} true labels, {pred.size} predictions")
    for arr, label in ((true, "true"), (pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{label} label outside [0, {num_classes})")
    counts = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def f1_score(precision, recall):
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    out = np.where(np.isnan(p) | np.isnan(r), np.nan, out)
    return float(out) if out.ndim == 0 else out


@dataclass
class ClassReport:
    recall: np.ndarray
    precision: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    accuracy: float
    macro: dict = field(default_factory=dict)

    def to_csv(self, auc: Optional[Sequence[float]] = None) -> str:
        head = "class,recall,precision,specificity,f1" + (",auc" if auc is not None else "")
        lines = [head]
        fmt = lambda v: "nan" if np.isnan(v) else f"{v:.6f}"  # noqa: E731
        for i in range(len(self.recall)):
            row = [str(i)] + [fmt(a[i]) for a in (self.recall, self.precision, self.specificity, self.f1)]
            if auc is not None:
                row.append(fmt(auc[i]))
            lines.append(",".join(row))
        row = ["macro"] + [fmt(self.macro[k]) for k in ("recall", "precision", "specificity", "f1")]
        if auc is not None:
            row.append(fmt(self.macro.get("auc", np.nan)))
        lines.append(",".join(row))
        lines.append(f"accuracy,{fmt(self.accuracy)},,," + ("," if auc is not None else ""))
        return "\n".join(lines) + "\n"


def _macro(values: np.ndarray, label: str) -> float:
    finite = values[~np.isnan(values)]
    if finite.size < values.size:
        warnings.warn(f"{values.size - finite.size} class(es) with undefined {label} "
                      "excluded from the macro average", RuntimeWarning, stacklevel=3)
    return float(finite.mean()) if finite.size else float("nan")


def classwise(cm: ConfusionMatrix) -> ClassReport:
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    total = c.sum()
    recall = _ratio(diag, row)
    precision = _ratio(diag, col)
    # sum over p != i, q != i  /  sum over p != i
    spec = _ratio(total - row - col + diag, total - row)
    f1 = f1_score(precision, recall)
    f1 = np.atleast_1d(f1)
    accuracy = float(diag.sum() / total) if total > 0 else float("nan")
    macro = {
        "recall": _macro(recall, "recall"),
        "precision": _macro(precision, "precision"),
        "specificity": _macro(spec, "specificity"),
        "f1": _macro(f1, "f1"),
    }
    return ClassReport(recall, precision, spec, f1, accuracy, macro)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        for th, f, t in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{th!r},{f!r},{t!r}")
        return "\n".join(lines) + "\n"


def roc_auc_ovr(scores, true, cls: int) -> RocCurve:
    """One-vs-rest ROC for class ``cls``.

    ``scores`` is ``(N, K)`` (column ``cls`` is used) or ``(N,)``.  Thresholds
    are the distinct scores in decreasing order; tied scores move the curve
    along a single diagonal segment, which gives half credit to tied pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[:, cls] if scores.ndim == 2 else scores
    y = np.asarray(true).reshape(-1) == cls
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be nonempty and of equal length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC undefined for class {cls}: {n_pos} positives, {n_neg} negatives")

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.diff(s_sorted) != 0, True]
    tp = np.cumsum(y_sorted)[last_of_run]
    fp = np.cumsum(~y_sorted)[last_of_run]
    tp = np.r_[0, tp].astype(np.int64)
    fp = np.r_[0, fp].astype(np.int64)
    # integer trapezoid sum, divided once
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    return RocCurve(fp / n_neg, tp / n_pos, thresholds, auc)


def predict_labels(scores) -> np.ndarray:
    """Argmax with ties going to the lowest class index."""
    return np.asarray(scores).argmax(axis=1)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    classes: ClassReport
    rocs: list
    aucs: np.ndarray

    @property
    def accuracy(self) -> float:
        return self.classes.accuracy

    @property
    def macro_auc(self) -> float:
        return self.classes.macro.get("auc", float("nan"))


def evaluate_scores(scores, true, num_classes: Optional[int] = None) -> EvalReport:
    """Confusion matrix, class-wise metrics and ROC curves from class scores."""
    scores = np.asarray(scores, dtype=np.float64)
    true = np.asarray(true, dtype=np.int64)
    K = num_classes or scores.shape[1]
    cm = confusion(true, predict_labels(scores), K)
    report = classwise(cm)
    rocs, aucs = [], []
    for i in range(K):
        try:
            roc = roc_auc_ovr(scores, true, i)
        except ValueError:
            roc = None
        rocs.append(roc)
        aucs.append(np.nan if roc is None else roc.auc)
    aucs = np.asarray(aucs)
    report.macro["auc"] = _macro(aucs, "auc")
    return EvalReport(cm, report, rocs, aucs)
