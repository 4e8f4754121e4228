"""Confusion matrices and the scores derived from them."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .network import CLASS_NAMES


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]


def confusion_matrix(true_labels, predicted_labels, k: int = 3, class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ConfigError(f"{t.size} true labels but {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ConfigError(f"{name} labels must lie in [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    if class_names is None:
        class_names = CLASS_NAMES if k == 3 else tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts, tuple(class_names))


def normalize_rows(cm: ConfusionMatrix) -> np.ndarray:
    rows = cm.counts.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise DataError(f"class {cm.class_names[empty[0]]!r} has no samples; cannot normalize its row")
    return cm.counts / rows[:, None]


def cohens_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement; 1.0 when both observed and chance agreement are 1."""
    n = cm.total
    if n == 0:
        raise DataError("kappa of an empty confusion matrix is undefined")
    c = cm.counts.astype(np.float64)
    po = np.trace(c) / n
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum()) / (n * n)
    if pe == 1.0:
        return 1.0
    return float((po - pe) / (1.0 - pe))


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / cm.total)


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


@dataclass
class ClassificationReport:
    class_names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: tuple[float, float, float]
    weighted: tuple[float, float, float]
    kappa: float
    mean_loss: Optional[float] = None

    def rows(self) -> list[tuple[str, float, float, float, int]]:
        """Three aggregate rows follow the per-class rows, as in common reporting tools."""
        total = int(self.support.sum())
        out = [
            (name, float(p), float(r), float(f), int(s))
            for name, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
        ]
        out.append(("accuracy", self.accuracy, self.accuracy, self.accuracy, total))
        out.append(("macro avg", *self.macro, total))
        out.append(("weighted avg", *self.weighted, total))
        return out

    def to_text(self) -> str:
        width = max(12, *(len(n) for n in self.class_names))
        lines = [f"{'':>{width}}  precision    recall  f1-score   support", ""]
        for i, (name, p, r, f, s) in enumerate(self.rows()):
            if i == len(self.class_names):
                lines.append("")
            if name == "accuracy":
                lines.append(f"{name:>{width}}  {'':>9}  {'':>8}  {f:8.2f}  {s:8d}")
            else:
                lines.append(f"{name:>{width}}  {p:9.2f}  {r:8.2f}  {f:8.2f}  {s:8d}")
        lines.append("")
        lines.append(f"{'kappa':>{width}}  {self.kappa:9.4f}")
        if self.mean_loss is not None:
            lines.append(f"{'loss':>{width}}  {self.mean_loss:9.4f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "precision", "recall", "f1", "support"])
            for name, p, r, f1, s in self.rows():
                w.writerow([name, repr(p), repr(r), repr(f1), s])


def classification_report(cm: ConfusionMatrix, per_sample_losses=None) -> ClassificationReport:
    if cm.total == 0:
        raise DataError("cannot report on an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    support = cm.counts.sum(axis=1)
    precision = _ratio(tp, c.sum(axis=0))
    recall = _ratio(tp, c.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    w = support / support.sum()
    loss = None
    if per_sample_losses is not None and len(per_sample_losses):
        loss = float(np.mean(per_sample_losses))
    return ClassificationReport(
        cm.class_names, precision, recall, f1, support,
        accuracy(cm),
        (float(precision.mean()), float(recall.mean()), float(f1.mean())),
        (float(precision @ w), float(recall @ w), float(f1 @ w)),
        cohens_kappa(cm),
        loss,
    )


def write_confusion_csv(cm: ConfusionMatrix, path, normalized: bool = False) -> None:
    values = normalize_rows(cm) if normalized else cm.counts
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true\\pred", *cm.class_names])
        for name, row in zip(cm.class_names, values):
            w.writerow([name, *(repr(float(v)) if normalized else int(v) for v in row)])
