#!/usr/bin/env python3
"""Generate the synthetic shape corpora used by the smoke experiments.

Writes two directories under --out: binary/ (filled squares vs hollow
rings, labeled with the binary screening vocabulary) and multiclass/
(five shape classes labeled with fine pathology names). Each directory
gets a manifest.csv compatible with the covidcaps CLI.
"""

import argparse
from pathlib import Path

from covidcaps.synthetic import generate_binary_dataset, generate_multiclass_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/synthetic", help="output root directory")
    parser.add_argument("--positives", type=int, default=80, help="binary positive count")
    parser.add_argument("--negatives", type=int, default=120, help="binary negative count")
    parser.add_argument("--per-class", type=int, default=30, help="multiclass images per class")
    parser.add_argument("--size", type=int, default=32, help="image side in pixels")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = Path(args.out)
    binary = generate_binary_dataset(
        root / "binary",
        n_positive=args.positives,
        n_negative=args.negatives,
        size=args.size,
        seed=args.seed,
    )
    multi = generate_multiclass_dataset(
        root / "multiclass", per_class=args.per_class, size=args.size, seed=args.seed
    )
    print(f"binary manifest:     {binary}")
    print(f"multiclass manifest: {multi}")


if __name__ == "__main__":
    main()
