#!/usr/bin/env python3
"""Transfer-learning smoke experiment on synthetic shapes.

Pretrains a five-class capsule model, swaps its head for a two-capsule
binary classifier, freezes the convolutional stack, fine-tunes, and
reports validation metrics for both stages plus a held-out evaluation.
Everything is seeded; two runs with the same flags produce identical
numbers.

Example:
    python3 scripts/run_transfer_experiment.py --workdir /tmp/exp --epochs 10
"""

import argparse
import json
from pathlib import Path

import numpy as np

from covidcaps.data import COVID_BINARY, NIH_5CLASS, load_batch, load_dataset
from covidcaps.metrics import (
    ScoredPrediction,
    evaluate,
    false_positive_breakdown,
    metrics_json,
)
from covidcaps.model import ArchitectureConfig, build_model, save_checkpoint
from covidcaps.synthetic import generate_binary_dataset, generate_multiclass_dataset
from covidcaps.tensor import Tensor
from covidcaps.trainer import TrainConfig, pretrain_then_finetune, write_history


def small_architecture(num_classes: int, side: int) -> ArchitectureConfig:
    return ArchitectureConfig(
        input_hw=(side, side),
        conv_channels=(8, 8, 16, 16),
        conv_kernels=(3, 3, 3, 3),
        primary_capsule_dim=4,
        mid_capsules=(8, 4),
        final_capsules=(num_classes, 8),
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/transfer", help="output directory")
    parser.add_argument("--epochs", type=int, default=20, help="epochs per stage")
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=32, help="image side in pixels")
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    print("== generating corpora ==")
    multi_manifest = generate_multiclass_dataset(
        work / "data" / "multiclass", per_class=40, size=args.size, seed=args.seed
    )
    train_manifest = generate_binary_dataset(
        work / "data" / "binary_train",
        n_positive=60,
        n_negative=90,
        size=args.size,
        seed=args.seed,
    )
    test_manifest = generate_binary_dataset(
        work / "data" / "binary_test",
        n_positive=20,
        n_negative=30,
        size=args.size,
        seed=args.seed + 1,
    )
    external = load_dataset(multi_manifest, NIH_5CLASS)
    target = load_dataset(train_manifest, COVID_BINARY)
    held_out = load_dataset(test_manifest, COVID_BINARY)

    print("== pretraining on the five-class corpus ==")
    base = build_model(
        small_architecture(len(external.classes), args.size), seed=args.seed
    )
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        val_fraction=0.2,
    )
    result = pretrain_then_finetune(external, target, cfg, cfg, base=base)
    print(f"pretrain best val accuracy:  {max(r['val_accuracy'] for r in result.pretrain_history):.3f}")
    print(f"finetune best val accuracy:  {max(r['val_accuracy'] for r in result.finetune_history):.3f}")

    save_checkpoint(result.pretrained, str(work / "pretrained.ccap"))
    save_checkpoint(result.model, str(work / "finetuned.ccap"))
    write_history(result.pretrain_history, work / "pretrain.history.jsonl")
    write_history(result.finetune_history, work / "finetune.history.jsonl")

    print("== held-out evaluation ==")
    model = result.model
    images, targets, labels = load_batch(held_out.records, size=args.size)
    chunks = [
        model.predict_proba(Tensor(images[i : i + 64])) for i in range(0, len(images), 64)
    ]
    lengths = np.concatenate(chunks)
    preds = [
        ScoredPrediction(
            score=float(lengths[i, 1]),
            is_positive=bool(targets[i] == 1),
            original_label=labels[i],
        )
        for i in range(len(targets))
    ]
    report = evaluate(preds)
    payload = metrics_json(report, false_positive_breakdown(preds))
    print(json.dumps(payload, indent=2))

    out = work / "heldout_metrics.json"
    out.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
