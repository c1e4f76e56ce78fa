"""Capsule-network chest X-ray classifier built on a numpy autodiff engine.

Train a binary classifier from scratch, or pretrain a five-class model on
a large external corpus and fine-tune a swapped two-capsule head with the
convolutional stack frozen. See the README for the CLI workflow.
"""

from .capsule import capsule_lengths, capsule_probabilities, predict_votes, route, squash
from .data import (
    COVID_BINARY,
    NIH_5CLASS,
    DatasetManifest,
    ManifestRecord,
    class_names,
    load_dataset,
    preprocess_image,
    split_train_val,
)
from .errors import CovidCapsError
from .metrics import (
    MetricsReport,
    ScoredPrediction,
    classification_metrics,
    evaluate,
    false_positive_breakdown,
    roc_auc,
)
from .model import (
    ArchitectureConfig,
    Model,
    build_model,
    freeze_feature_extractor,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)
from .objective import ClassBalance, LossConfig, batch_objective, class_weighted_loss, margin_loss
from .optim import Adam
from .tensor import Tensor, avg_pool2d, backward, batch_norm, conv2d, dense, einsum, softmax
from .trainer import TrainConfig, TransferResult, pretrain_then_finetune, train, write_history

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ArchitectureConfig",
    "ClassBalance",
    "COVID_BINARY",
    "CovidCapsError",
    "DatasetManifest",
    "LossConfig",
    "ManifestRecord",
    "MetricsReport",
    "Model",
    "NIH_5CLASS",
    "ScoredPrediction",
    "Tensor",
    "TrainConfig",
    "TransferResult",
    "avg_pool2d",
    "backward",
    "batch_norm",
    "batch_objective",
    "build_model",
    "capsule_lengths",
    "capsule_probabilities",
    "class_names",
    "class_weighted_loss",
    "classification_metrics",
    "conv2d",
    "dense",
    "einsum",
    "evaluate",
    "false_positive_breakdown",
    "freeze_feature_extractor",
    "load_checkpoint",
    "load_dataset",
    "margin_loss",
    "predict_votes",
    "preprocess_image",
    "pretrain_then_finetune",
    "replace_head",
    "roc_auc",
    "route",
    "save_checkpoint",
    "softmax",
    "split_train_val",
    "squash",
    "train",
    "write_history",
]
