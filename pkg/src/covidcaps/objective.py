"""Margin loss over capsule lengths, with optional class-imbalance weighting.

Each class capsule is pushed to be long (>= m_plus) when its class is
present and short (<= m_minus) otherwise; the lambda factor down-weights
the absent-class term so early training does not shrink every capsule.
For skewed datasets the per-class batch losses are recombined with weights
proportional to the *other* class's share of the dataset, so the rare
class is not drowned out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ParameterError
from .tensor import Tensor

__all__ = ["LossConfig", "ClassBalance", "margin_loss", "class_weighted_loss", "batch_objective"]

# slack for float noise in squashed lengths, which are < 1 by construction
_LENGTH_SLACK = 1e-7


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.m_minus < self.m_plus <= 1.0):
            raise ParameterError(
                f"need 0 <= m_minus < m_plus <= 1, got m_minus={self.m_minus}, m_plus={self.m_plus}"
            )
        if self.lam < 0.0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class ClassBalance:
    """Dataset-level example counts for the two-class weighting scheme."""

    positives: int
    negatives: int

    def __post_init__(self):
        if self.positives < 0 or self.negatives < 0:
            raise ParameterError("class counts must be non-negative")
        if self.positives + self.negatives == 0:
            raise ParameterError("class balance needs at least one example")

    @property
    def positive_weight(self) -> float:
        """Weight applied to the positive-class loss: the negative share."""
        return self.negatives / (self.positives + self.negatives)

    @property
    def negative_weight(self) -> float:
        """Weight applied to the negative-class loss: the positive share.

        Computed as the complement so the two weights sum to exactly 1.0
        (a direct positives/total division can be one ulp off the
        complement for counts like 1 and 6).
        """
        return 1.0 - self.positive_weight


def _check_lengths(values: np.ndarray) -> None:
    if values.size == 0:
        raise ContractError("need at least one capsule length")
    if np.any(values < -_LENGTH_SLACK) or np.any(values > 1.0 + _LENGTH_SLACK):
        raise ContractError(
            f"capsule lengths must lie in [0, 1], got range [{values.min()}, {values.max()}]"
        )


def margin_loss(lengths: np.ndarray, labels: np.ndarray, config: LossConfig = LossConfig()) -> float:
    """Single-sample margin loss, summed over classes, as a plain float.

    ``lengths`` holds one capsule length per class and ``labels`` is the
    matching one-hot row marking the true class.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if lengths.ndim != 1:
        raise ContractError(f"lengths must be 1-D (one per class), got shape {lengths.shape}")
    _check_lengths(lengths)
    if labels.shape != lengths.shape:
        raise ContractError(f"labels shape {labels.shape} does not match lengths {lengths.shape}")
    if not (np.all((labels == 0.0) | (labels == 1.0)) and labels.sum() == 1.0):
        raise ContractError(f"labels must be one-hot, got {labels}")

    total = 0.0
    for t_k, length in zip(labels, lengths):
        if t_k:
            total += max(0.0, config.m_plus - length) ** 2
        else:
            total += config.lam * max(0.0, length - config.m_minus) ** 2
    return total


def class_weighted_loss(loss_positive: float, loss_negative: float, balance: ClassBalance) -> float:
    """Cross-weighted combination of the two per-class losses."""
    return balance.positive_weight * loss_positive + balance.negative_weight * loss_negative


def batch_objective(
    lengths: Tensor,
    targets: Sequence[int],
    config: LossConfig = LossConfig(),
    balance: Optional[ClassBalance] = None,
    positive_index: int = 1,
) -> Tensor:
    """Differentiable batch loss over capsule lengths shaped (batch, classes).

    Without ``balance`` the per-sample margin losses are averaged plainly
    (the multi-class pretraining case). With ``balance`` the batch is split
    into positive and negative samples by ``positive_index``, each group's
    losses are averaged, and the two means are recombined with the
    cross weights; a group absent from the batch contributes nothing.
    """
    if lengths.ndim != 2:
        raise ContractError(f"lengths must be (batch, classes), got shape {lengths.shape}")
    batch, num_classes = lengths.shape
    targets = np.asarray(targets)
    if targets.shape != (batch,):
        raise ContractError(f"expected {batch} targets, got shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise ContractError(f"targets must lie in [0, {num_classes}), got {targets}")
    _check_lengths(lengths.data)

    one_hot = np.zeros((batch, num_classes), dtype=lengths.data.dtype)
    one_hot[np.arange(batch), targets] = 1.0

    present = ((config.m_plus - lengths).relu() * Tensor(one_hot)) ** 2
    absent = ((lengths - config.m_minus).relu() * Tensor(1.0 - one_hot)) ** 2
    # T and (1-T) are 0/1 so squaring them is a no-op; folding them inside
    # the square keeps the hinge gradient masked without an extra multiply
    per_sample = (present + absent * config.lam).sum(axis=1)

    if balance is None:
        return per_sample.mean()

    if not 0 <= positive_index < num_classes:
        raise ContractError(f"positive_index {positive_index} out of range")
    pos_mask = (targets == positive_index).astype(lengths.data.dtype)
    neg_mask = 1.0 - pos_mask
    n_pos = float(pos_mask.sum())
    n_neg = float(neg_mask.sum())

    zero = Tensor(np.zeros((), dtype=lengths.data.dtype))
    loss_pos = (per_sample * Tensor(pos_mask)).sum() * (1.0 / n_pos) if n_pos else zero
    loss_neg = (per_sample * Tensor(neg_mask)).sum() * (1.0 / n_neg) if n_neg else zero
    return loss_pos * balance.positive_weight + loss_neg * balance.negative_weight
