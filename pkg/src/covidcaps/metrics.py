"""Binary classification metrics over scored predictions.

The score of a prediction is the positive-class capsule length, a number
in [0, 1). Hard labels come from a threshold (default 0.5); an argmax rule
over the two capsule lengths is available as an alternative. Sensitivity
and specificity with an empty denominator are reported as undefined
(None), never as 0. AUC is the Mann-Whitney statistic with half credit
for ties, computed from average ranks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "ScoredPrediction",
    "MetricsReport",
    "classification_metrics",
    "roc_auc",
    "false_positive_breakdown",
    "predict_argmax",
    "evaluate",
    "metrics_json",
]


@dataclass(frozen=True)
class ScoredPrediction:
    score: float  # positive-class capsule length
    is_positive: bool  # ground truth
    original_label: str = ""  # label before binarization

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ContractError(f"prediction score must be finite, got {self.score}")


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: Optional[float]  # None when tp + fn == 0
    specificity: Optional[float]  # None when tn + fp == 0
    auc: Optional[float] = None
    threshold: float = 0.5


def classification_metrics(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> MetricsReport:
    """Confusion counts and ratios; score >= threshold predicts positive."""
    if not preds:
        raise ContractError("need at least one prediction")
    tp = fp = tn = fn = 0
    for p in preds:
        predicted_positive = p.score >= threshold
        if p.is_positive:
            tp += predicted_positive
            fn += not predicted_positive
        else:
            fp += predicted_positive
            tn += not predicted_positive
    total = tp + fp + tn + fn
    return MetricsReport(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / total,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        threshold=threshold,
    )


def roc_auc(preds: Sequence[ScoredPrediction]) -> tuple[float, list[tuple[float, float]]]:
    """AUC plus the (fpr, tpr) staircase from a threshold sweep.

    The curve runs from (1, 1) (threshold at the minimum score, everything
    predicted positive) down to (0, 0) (threshold above the maximum).
    Requires both classes to be present.
    """
    scores = np.array([p.score for p in preds], dtype=np.float64)
    truth = np.array([p.is_positive for p in preds], dtype=bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")

    # average ranks give each tied positive/negative pair exactly 0.5 credit
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    avg_ranks = (starts + ends) / 2.0
    ranks = avg_ranks[inverse]
    u_stat = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    auc = float(u_stat / (n_pos * n_neg))

    curve = []
    for t in uniq:  # ascending distinct scores; the first point is (1, 1)
        predicted = scores >= t
        tpr = float((predicted & truth).sum() / n_pos)
        fpr = float((predicted & ~truth).sum() / n_neg)
        curve.append((fpr, tpr))
    curve.append((0.0, 0.0))
    return auc, curve


def false_positive_breakdown(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> dict[str, float]:
    """Fraction of false positives carrying each original label.

    Empty when there are no false positives; otherwise the fractions sum
    to 1.
    """
    fp_labels = [p.original_label for p in preds if not p.is_positive and p.score >= threshold]
    if not fp_labels:
        return {}
    total = len(fp_labels)
    out: dict[str, float] = {}
    for label in fp_labels:
        out[label] = out.get(label, 0.0) + 1.0
    return {label: count / total for label, count in sorted(out.items())}


def predict_argmax(lengths: np.ndarray) -> np.ndarray:
    """Alternative hard-label rule: index of the longest class capsule.

    ``lengths`` is (batch, classes); returns int predictions per sample.
    """
    lengths = np.asarray(lengths)
    if lengths.ndim != 2 or lengths.shape[1] < 2:
        raise ContractError(f"lengths must be (batch, >=2 classes), got shape {lengths.shape}")
    return lengths.argmax(axis=1)


def evaluate(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> MetricsReport:
    """Full report: confusion counts plus AUC (None if one class is absent)."""
    report = classification_metrics(preds, threshold)
    try:
        report.auc, _ = roc_auc(preds)
    except ContractError:
        report.auc = None
    return report


def metrics_json(report: MetricsReport, breakdown: dict[str, float]) -> dict:
    """The flat dict that eval runs write out as JSON."""
    return {
        "tp": report.tp,
        "fp": report.fp,
        "tn": report.tn,
        "fn": report.fn,
        "accuracy": report.accuracy,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "auc": report.auc,
        "threshold": report.threshold,
        "fp_breakdown": breakdown,
    }
