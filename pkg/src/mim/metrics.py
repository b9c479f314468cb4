"""Offline matching metrics: accuracy, ROC AUC (rank statistic) and F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

__all__ = ["UNDEFINED", "accuracy", "auc", "f1", "precision_recall", "MetricsReport", "mean_reports"]

# AUC without both classes present
UNDEFINED = float("nan")


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"{scores.size} scores but {labels.size} labels")
    if scores.size < 1:
        raise ValidationError("metrics need at least one example")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    """Fraction of examples whose thresholded score (``>= threshold``) equals the label."""
    preds, labels = _check(preds, labels)
    return float(np.mean((preds >= threshold).astype(np.int64) == labels))


def auc(scores, labels) -> float:
    """``(concordant + 0.5 * tied) / (n_pos * n_neg)`` over positive/negative pairs.

    Computed through average ranks, which credits ties with one half.
    Returns :data:`UNDEFINED` (NaN) when a class is missing.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(scores)  # average ranks, exact halves for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall(preds, labels, threshold: float = 0.5) -> tuple[float, float]:
    preds, labels = _check(preds, labels)
    hard = preds >= threshold
    tp = int(np.sum(hard & (labels == 1)))
    fp = int(np.sum(hard & (labels == 0)))
    fn = int(np.sum(~hard & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def f1(preds, labels, threshold: float = 0.5) -> float:
    """Harmonic mean of precision and recall, 0 when both are 0."""
    p, r = precision_recall(preds, labels, threshold)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    f1: float
    n_examples: int
    losses: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5, losses: dict | None = None) -> MetricsReport:
        return cls(
            accuracy=accuracy(scores, labels, threshold),
            auc=auc(scores, labels),
            f1=f1(scores, labels, threshold),
            n_examples=int(np.asarray(labels).size),
            losses=dict(losses or {}),
        )

    @property
    def auc_defined(self) -> bool:
        return not math.isnan(self.auc)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        auc_text = "undefined" if not self.auc_defined else f"{self.auc:.4f}"
        return f"n={self.n_examples} accuracy={self.accuracy:.4f} auc={auc_text} f1={self.f1:.4f}"


def mean_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Field-wise mean of several reports (e.g. over the best k checkpoints)."""
    if not reports:
        raise ValidationError("no reports to average")
    keys = sorted(set().union(*(r.losses for r in reports)))
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        auc=float(np.mean([r.auc for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        n_examples=reports[0].n_examples,
        losses={k: float(np.mean([r.losses.get(k, 0.0) for r in reports])) for k in keys},
    )
