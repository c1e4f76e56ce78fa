"""Command-line workflow: train, pretrain, finetune, eval, predict.

Every command is reproducible from its flags; all randomness flows from
--seed. Exit codes: 0 success, 1 usage error, 2 missing input file,
3 training diverged, 4 any other package error (each with a one-line
diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    COVID_BINARY,
    NIH_5CLASS,
    class_names,
    load_dataset,
    preprocess_image,
)
from .errors import ConfigError, ContractError, CovidCapsError, TrainingDivergedError
from .metrics import (
    classification_metrics,
    false_positive_breakdown,
    metrics_json,
    roc_auc,
    ScoredPrediction,
)
from .model import (
    ArchitectureConfig,
    build_model,
    freeze_feature_extractor,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)
from .tensor import Tensor
from .trainer import TrainConfig, train, write_history

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this interface promises 1 + usage
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="CSV manifest with header path,label")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--val-split", type=float, default=0.1, help="validation fraction")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--history", default=None, help="history JSON-lines path (default: <out>.history.jsonl)")
    p.add_argument(
        "--image-size",
        type=int,
        default=None,
        help="square input resolution the model is built for (default: 128; "
        "for finetune, the base checkpoint's resolution)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="covidcaps",
        description="Capsule-network chest X-ray classifier",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train",
        help="train a binary classifier from scratch",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_common_train_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_pre = sub.add_parser(
        "pretrain",
        help="train a five-class model on an external manifest",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_common_train_flags(p_pre)
    p_pre.set_defaults(func=_cmd_pretrain)

    p_fine = sub.add_parser(
        "finetune",
        help="replace the head of a pretrained model, freeze the conv stack, fine-tune",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_fine.add_argument("--base", required=True, help="checkpoint to start from")
    _add_common_train_flags(p_fine)
    p_fine.set_defaults(func=_cmd_finetune)

    p_eval = sub.add_parser(
        "eval",
        help="evaluate a checkpoint on a binary manifest, print metrics JSON",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_eval.add_argument("--model", required=True, help="checkpoint path")
    p_eval.add_argument("--manifest", required=True, help="CSV manifest with header path,label")
    p_eval.add_argument("--threshold", type=float, default=0.5, help="positive decision threshold")
    p_eval.set_defaults(func=_cmd_eval)

    p_pred = sub.add_parser(
        "predict",
        help="score one image, print per-class capsule lengths and the decision",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_pred.add_argument("--model", required=True, help="checkpoint path")
    p_pred.add_argument("--image", required=True, help="image file")
    p_pred.add_argument("--threshold", type=float, default=0.5, help="positive decision threshold")
    p_pred.set_defaults(func=_cmd_predict)

    return parser


def _require_file(path: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(path)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        val_fraction=args.val_split,
    )


def _history_path(args) -> str:
    return args.history if args.history else f"{args.out}.history.jsonl"


def _finish_training(best, history, args) -> int:
    save_checkpoint(best, args.out)
    hist_path = _history_path(args)
    write_history(history, hist_path)
    best_acc = max(row["val_accuracy"] for row in history)
    print(
        json.dumps(
            {"checkpoint": args.out, "history": hist_path, "best_val_accuracy": best_acc}
        )
    )
    return 0


def _fresh_model(args, num_classes: int):
    side = args.image_size if args.image_size else 128
    default = ArchitectureConfig()
    arch = dataclasses.replace(
        default,
        input_hw=(side, side),
        final_capsules=(num_classes, default.final_capsules[1]),
    )
    return build_model(arch, seed=args.seed)


def _cmd_train(args) -> int:
    _require_file(args.manifest)
    dataset = load_dataset(args.manifest, COVID_BINARY)
    model = _fresh_model(args, len(dataset.classes))
    best, history = train(model, dataset, _train_config(args))
    return _finish_training(best, history, args)


def _cmd_pretrain(args) -> int:
    _require_file(args.manifest)
    dataset = load_dataset(args.manifest, NIH_5CLASS)
    model = _fresh_model(args, len(dataset.classes))
    best, history = train(model, dataset, _train_config(args))
    return _finish_training(best, history, args)


def _cmd_finetune(args) -> int:
    _require_file(args.base)
    _require_file(args.manifest)
    dataset = load_dataset(args.manifest, COVID_BINARY)
    model = load_checkpoint(args.base)
    if args.image_size and tuple(model.config.input_hw) != (args.image_size, args.image_size):
        raise ConfigError(
            f"base model expects input {model.config.input_hw}, cannot rebuild at {args.image_size}"
        )
    replace_head(model, len(dataset.classes), seed=args.seed)
    freeze_feature_extractor(model)
    best, history = train(model, dataset, _train_config(args))
    return _finish_training(best, history, args)


def _predictions(model, dataset, batch_size: int = 16) -> list[ScoredPrediction]:
    hw = tuple(model.config.input_hw)
    records = dataset.records
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x = np.stack([preprocess_image(r.path, hw) for r in chunk])
        lengths = model.predict_proba(Tensor(x))
        for r, row in zip(chunk, lengths):
            preds.append(
                ScoredPrediction(
                    score=float(row[1]), is_positive=bool(r.target == 1), original_label=r.label
                )
            )
    return preds


def _cmd_eval(args) -> int:
    _require_file(args.model)
    _require_file(args.manifest)
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.manifest, COVID_BINARY)
    if model.config.num_classes != len(dataset.classes):
        raise ConfigError(
            f"model head has {model.config.num_classes} capsules, manifest scheme needs "
            f"{len(dataset.classes)}"
        )
    preds = _predictions(model, dataset)
    report = classification_metrics(preds, args.threshold)
    try:
        report.auc, _ = roc_auc(preds)
    except ContractError:
        report.auc = None
    breakdown = false_positive_breakdown(preds, args.threshold)
    print(json.dumps(metrics_json(report, breakdown), indent=2))
    return 0


def _cmd_predict(args) -> int:
    _require_file(args.model)
    _require_file(args.image)
    model = load_checkpoint(args.model)
    x = preprocess_image(args.image, tuple(model.config.input_hw))
    lengths = model.predict_proba(Tensor(x[None]))[0]

    k = model.config.num_classes
    if k == len(class_names(COVID_BINARY)):
        names = list(class_names(COVID_BINARY))
        decision = names[1] if lengths[1] >= args.threshold else names[0]
    elif k == len(class_names(NIH_5CLASS)):
        names = list(class_names(NIH_5CLASS))
        decision = names[int(np.argmax(lengths))]
    else:
        names = [f"class_{i}" for i in range(k)]
        decision = names[int(np.argmax(lengths))]

    print(json.dumps({"classes": names, "lengths": [float(v) for v in lengths], "decision": decision}))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"covidcaps: error: no such file: {exc.args[0]}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"covidcaps: error: {exc}", file=sys.stderr)
        return 3
    except CovidCapsError as exc:
        print(f"covidcaps: error: {exc}", file=sys.stderr)
        return 4
