"""Synthetic shape datasets for smoke training and pipeline tests.

The binary set contrasts filled squares (positive class) against hollow
rings (negative classes) on a dim noisy background. The two shapes are
separable by construction: a square lights up at least 144 pixels above
0.5, a ring at most ~101, so the linear rule "count bright pixels, compare
to 120" classifies the set perfectly. Tests verify that rule before
trusting the set to measure anything about a model.

The five-class set gives each coarse pathology category its own shape and
writes the fine-grained label an upstream corpus would carry.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError

__all__ = [
    "BRIGHT_PIXEL_RULE_THRESHOLD",
    "binary_shape_image",
    "multiclass_shape_image",
    "bright_pixel_count",
    "generate_binary_dataset",
    "generate_multiclass_dataset",
]

_SIZE = 32
_BACKGROUND_MAX = 0.15
_SHAPE_MIN = 0.75

# bright-pixel counts: squares land in [144, 225], rings below ~101
BRIGHT_PIXEL_RULE_THRESHOLD = 120

# one negative label per non-positive class in the binary vocabulary
_NEGATIVE_LABELS = ("Normal", "Bacterial", "Non-COVID Viral")

# shape per coarse category, labeled with a fine label from that category
_MULTICLASS_LABELS = ("No Findings", "Mass", "Effusion", "Pneumonia", "Edema")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.uniform(0.0, _BACKGROUND_MAX, size=(size, size))


def _shape_intensity(rng: np.random.Generator) -> float:
    return rng.uniform(_SHAPE_MIN, 1.0)


def _draw_square(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    side = int(rng.integers(12, 16))  # 144..225 bright pixels
    top = int(rng.integers(1, size - side - 1))
    left = int(rng.integers(1, size - side - 1))
    img[top : top + side, left : left + side] = _shape_intensity(rng)


def _draw_ring(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    radius = int(rng.integers(6, 9))
    cy = int(rng.integers(radius + 2, size - radius - 2))
    cx = int(rng.integers(radius + 2, size - radius - 2))
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = (dist >= radius - 1) & (dist < radius + 1)
    img[mask] = _shape_intensity(rng)


def _draw_disk(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    radius = int(rng.integers(5, 8))
    cy = int(rng.integers(radius + 2, size - radius - 2))
    cx = int(rng.integers(radius + 2, size - radius - 2))
    yy, xx = np.mgrid[0:size, 0:size]
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = _shape_intensity(rng)


def _draw_bottom_band(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    height = int(rng.integers(8, 13))
    img[size - height :, :] = _shape_intensity(rng)


def _draw_vertical_bar(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    width = int(rng.integers(4, 7))
    left = int(rng.integers(2, size - width - 2))
    img[2 : size - 2, left : left + width] = _shape_intensity(rng)


def binary_shape_image(positive: bool, rng: np.random.Generator, size: int = _SIZE) -> np.ndarray:
    """One (size, size) float image: filled square if positive, else ring."""
    if size < 24:
        raise ParameterError(f"shapes need at least a 24-pixel canvas, got {size}")
    img = _background(rng, size)
    if positive:
        _draw_square(rng, img)
    else:
        _draw_ring(rng, img)
    return img


def multiclass_shape_image(class_index: int, rng: np.random.Generator, size: int = _SIZE) -> np.ndarray:
    """One image for the five-class set; index follows _MULTICLASS_LABELS."""
    if size < 24:
        raise ParameterError(f"shapes need at least a 24-pixel canvas, got {size}")
    img = _background(rng, size)
    draw = (
        lambda r, i: None,  # No Findings: background only
        _draw_disk,
        _draw_bottom_band,
        _draw_ring,
        _draw_vertical_bar,
    )
    if not 0 <= class_index < len(draw):
        raise ParameterError(f"class index {class_index} out of range")
    draw[class_index](rng, img)
    return img


def bright_pixel_count(img: np.ndarray, level: float = 0.5) -> int:
    return int((img > level).sum())


def _save_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8), mode="L").save(path)


def _write_manifest(path: Path, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        writer.writerows(rows)


def generate_binary_dataset(
    out_dir: str | Path,
    n_positive: int = 80,
    n_negative: int = 120,
    size: int = _SIZE,
    seed: int = 0,
) -> Path:
    """Write PNGs plus a manifest.csv; returns the manifest path.

    Negative images cycle through the three non-positive labels so the
    false-positive breakdown has something to group by.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, str]] = []
    for i in range(n_positive):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0, i])
        name = f"pos_{i:04d}.png"
        _save_png(binary_shape_image(True, rng, size), out / name)
        rows.append((name, "COVID-19"))
    for i in range(n_negative):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 1, i])
        name = f"neg_{i:04d}.png"
        _save_png(binary_shape_image(False, rng, size), out / name)
        rows.append((name, _NEGATIVE_LABELS[i % len(_NEGATIVE_LABELS)]))
    manifest = out / "manifest.csv"
    _write_manifest(manifest, rows)
    return manifest


def generate_multiclass_dataset(
    out_dir: str | Path,
    per_class: int = 30,
    size: int = _SIZE,
    seed: int = 0,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, str]] = []
    for cls, label in enumerate(_MULTICLASS_LABELS):
        for i in range(per_class):
            rng = np.random.default_rng([seed & 0xFFFFFFFF, 2, cls, i])
            name = f"cls{cls}_{i:04d}.png"
            _save_png(multiclass_shape_image(cls, rng, size), out / name)
            rows.append((name, label))
    manifest = out / "manifest.csv"
    _write_manifest(manifest, rows)
    return manifest
