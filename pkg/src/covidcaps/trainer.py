"""Training loop with validation-based model selection, plus the
pretrain-then-finetune transfer workflow.

Each epoch shuffles the training split with a seeded permutation, walks it
in batches (the last partial batch is kept), and updates the trainable
parameters with Adam. After every epoch the model is scored on the held
out validation split; the snapshot with the best validation accuracy is
retained, ties broken by lower validation loss, then by earlier epoch.
A non-finite training loss or normalization statistic aborts the run
with its epoch/batch location.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import COVID_BINARY, DatasetManifest, ManifestRecord, preprocess_image, split_train_val
from .errors import ConfigError, ContractError, TrainingDivergedError
from .metrics import ScoredPrediction, classification_metrics, predict_argmax, roc_auc
from .model import ArchitectureConfig, Model, build_model, freeze_feature_extractor, replace_head
from .objective import ClassBalance, LossConfig, batch_objective
from .optim import Adam
from .tensor import Tensor

__all__ = ["TrainConfig", "TransferResult", "train", "pretrain_then_finetune", "write_history"]

_POSITIVE_INDEX = 1  # class order for the binary scheme is (negative, positive)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


def _preload(records: Sequence[ManifestRecord], hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    images = np.stack([preprocess_image(r.path, hw) for r in records])
    targets = np.array([r.target for r in records], dtype=np.int64)
    labels = [r.label for r in records]
    return images, targets, labels


def _validation_row(
    model: Model,
    images: np.ndarray,
    targets: np.ndarray,
    labels: list[str],
    binary: bool,
    balance: Optional[ClassBalance],
    loss_cfg: LossConfig,
    batch_size: int,
) -> tuple[dict, float]:
    """Validation metrics dict (the history keys minus epoch/train_loss)
    and the validation loss used for tie-breaking."""
    chunks = [
        model.predict_proba(Tensor(images[i : i + batch_size]))
        for i in range(0, len(images), batch_size)
    ]
    lengths = np.concatenate(chunks, axis=0)
    val_loss = batch_objective(
        Tensor(lengths.clip(0.0, 1.0)),
        targets,
        loss_cfg,
        balance=balance,
        positive_index=_POSITIVE_INDEX,
    ).item()

    if binary:
        preds = [
            ScoredPrediction(
                score=float(lengths[i, _POSITIVE_INDEX]),
                is_positive=bool(targets[i] == _POSITIVE_INDEX),
                original_label=labels[i],
            )
            for i in range(len(targets))
        ]
        report = classification_metrics(preds)
        try:
            auc, _ = roc_auc(preds)
        except ContractError:
            auc = None
        row = {
            "val_accuracy": report.accuracy,
            "val_sensitivity": report.sensitivity,
            "val_specificity": report.specificity,
            "val_auc": auc,
        }
    else:
        # multi-class: accuracy by longest capsule; the binary-only
        # metrics have no meaning here and stay null in the history
        accuracy = float((predict_argmax(lengths) == targets).mean())
        row = {
            "val_accuracy": accuracy,
            "val_sensitivity": None,
            "val_specificity": None,
            "val_auc": None,
        }
    return row, val_loss


def train(model: Model, dataset: DatasetManifest, cfg: TrainConfig) -> tuple[Model, list[dict]]:
    """Train on a manifest; return the best validation snapshot and history.

    History is one dict per epoch with keys epoch, train_loss,
    val_accuracy, val_sensitivity, val_specificity, val_auc.
    """
    if len(dataset.classes) != model.config.num_classes:
        raise ConfigError(
            f"dataset scheme {dataset.scheme!r} has {len(dataset.classes)} classes "
            f"but the model head has {model.config.num_classes}"
        )
    binary = dataset.scheme == COVID_BINARY
    balance = None
    if binary:
        balance = dataset.balance()
        if balance.positives == 0 or balance.negatives == 0:
            raise ConfigError(
                f"binary training needs both classes, got {balance.positives} positive "
                f"and {balance.negatives} negative examples"
            )

    train_recs, val_recs = split_train_val(dataset.records, cfg.val_fraction, cfg.seed)
    hw = tuple(model.config.input_hw)
    x_train, y_train, _ = _preload(train_recs, hw)
    x_val, y_val, val_labels = _preload(val_recs, hw)

    params = {name: t for name, t in model.params.items() if name not in model.buffers}
    optimizer = Adam(params, lr=cfg.lr)
    trainable_tensors = [t for name, t in params.items() if model.trainable[name]]
    if not trainable_tensors:
        raise ConfigError("model has no trainable parameters")

    n = len(train_recs)
    best: Optional[Model] = None
    best_key: Optional[tuple] = None
    history: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        perm = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 7, epoch]).permutation(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            x = Tensor(x_train[idx])
            lengths = model.class_lengths(x, training=True)
            loss = batch_objective(
                lengths, y_train[idx], cfg.loss, balance=balance, positive_index=_POSITIVE_INDEX
            )
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, batch {batch_index}"
                )
            # blown-up activations can overflow the running normalization
            # statistics while squash still bounds the loss; that model can
            # never serve inference, so it counts as divergence too
            for name in model.buffers:
                if not np.all(np.isfinite(model.params[name].data)):
                    raise TrainingDivergedError(
                        f"normalization statistic {name!r} became non-finite "
                        f"at epoch {epoch}, batch {batch_index}"
                    )
            model.zero_grad()
            loss.backward(params=trainable_tensors)
            optimizer.step()
            loss_sum += loss_value * len(idx)

        row, val_loss = _validation_row(
            model, x_val, y_val, val_labels, binary, balance, cfg.loss, cfg.batch_size
        )
        record = {"epoch": epoch, "train_loss": loss_sum / n, **row}
        history.append(record)

        # larger accuracy wins; ties prefer lower val loss, then the
        # earlier epoch (strict comparison keeps the earlier snapshot)
        key = (record["val_accuracy"], -val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best = model.copy()

    assert best is not None
    return best, history


@dataclass
class TransferResult:
    model: Model  # best fine-tuned snapshot
    pretrained: Model  # best pretraining snapshot, before surgery
    pretrain_history: list[dict] = field(default_factory=list)
    finetune_history: list[dict] = field(default_factory=list)


def pretrain_then_finetune(
    external: DatasetManifest,
    target: DatasetManifest,
    cfg_pre: TrainConfig,
    cfg_fine: TrainConfig,
    base: Optional[Model] = None,
) -> TransferResult:
    """Train on the external dataset, retarget the head, fine-tune frozen.

    The model is first trained with one class capsule per external class.
    Its head is then replaced with one capsule per target class, the
    convolutional stack (including normalization affine parameters) is
    frozen, and only the capsule layers are fine-tuned on the target
    manifest.
    """
    if base is None:
        default = ArchitectureConfig()
        arch = dataclasses.replace(
            default, final_capsules=(len(external.classes), default.final_capsules[1])
        )
        base = build_model(arch, loss=cfg_pre.loss, seed=cfg_pre.seed)
    elif base.config.num_classes != len(external.classes):
        raise ConfigError(
            f"base model head has {base.config.num_classes} capsules, external data has "
            f"{len(external.classes)} classes"
        )

    pretrained_best, pre_history = train(base, external, cfg_pre)
    pretrained_snapshot = pretrained_best.copy()

    replace_head(pretrained_best, len(target.classes), seed=cfg_fine.seed)
    freeze_feature_extractor(pretrained_best)
    fine_best, fine_history = train(pretrained_best, target, cfg_fine)

    return TransferResult(
        model=fine_best,
        pretrained=pretrained_snapshot,
        pretrain_history=pre_history,
        finetune_history=fine_history,
    )


def write_history(history: list[dict], path: str | Path) -> None:
    """One JSON object per line, one line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
