"""Dataset manifests, label schemes, and image preprocessing.

A dataset is described by a CSV manifest with header ``path,label``; image
paths are resolved relative to the manifest file. Two labeling schemes are
supported:

``covid_binary``
    Chest X-rays labeled COVID-19, Normal, Bacterial or Non-COVID Viral.
    COVID-19 is the positive class; the other three collapse to negative.
    The original label is kept on every record so false positives can be
    broken down by what the image actually showed.

``nih_5class``
    The 15 single-pathology labels of the large public chest X-ray corpus,
    regrouped into five coarse categories (No Findings, Tumors, Pleural
    Diseases, Lung Infection, Others). Rows carrying several labels joined
    by ``|`` are dropped and counted.

Images are decoded with Pillow, converted to a single luminance channel,
scaled to [0, 1] and resized with bilinear interpolation (half-pixel
sample centers, edges clamped).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageReadError, ManifestError, SchemeError, SplitError, VocabularyError
from .objective import ClassBalance

__all__ = [
    "COVID_BINARY",
    "NIH_5CLASS",
    "SCHEMES",
    "class_names",
    "normalize_label",
    "ManifestRecord",
    "DatasetManifest",
    "read_manifest_rows",
    "map_covid_labels",
    "map_nih_labels",
    "load_dataset",
    "split_train_val",
    "bilinear_resize",
    "to_grayscale",
    "preprocess_image",
    "load_batch",
]

COVID_BINARY = "covid_binary"
NIH_5CLASS = "nih_5class"
SCHEMES = (COVID_BINARY, NIH_5CLASS)

_BINARY_CLASSES = ("negative", "positive")
_COVID_POSITIVE = "covid-19"
_COVID_NEGATIVES = ("normal", "bacterial", "non-covid viral")

# five coarse categories and the fine labels each absorbs
_NIH_CLASSES = ("No Findings", "Tumors", "Pleural Diseases", "Lung Infection", "Others")
_NIH_GROUPS = {
    "No Findings": ("no findings",),
    "Tumors": ("infiltration", "mass", "nodule"),
    "Pleural Diseases": ("effusion", "pleural thickening", "pneumothorax"),
    "Lung Infection": ("consolidation", "pneumonia"),
    "Others": ("atelectasis", "cardiomegaly", "edema", "emphysema", "fibrosis", "hernia"),
}
_NIH_LOOKUP = {
    fine: idx for idx, cls in enumerate(_NIH_CLASSES) for fine in _NIH_GROUPS[cls]
}


def normalize_label(label: str) -> str:
    """Lowercase and collapse internal whitespace for vocabulary matching."""
    return " ".join(label.strip().lower().split())


def class_names(scheme: str) -> tuple[str, ...]:
    if scheme == COVID_BINARY:
        return _BINARY_CLASSES
    if scheme == NIH_5CLASS:
        return _NIH_CLASSES
    raise SchemeError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str  # original label as written in the manifest
    target: int  # class index under the active scheme


@dataclass
class DatasetManifest:
    scheme: str
    records: list[ManifestRecord]
    dropped_multilabel: int = 0
    classes: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.classes = class_names(self.scheme)

    def __len__(self) -> int:
        return len(self.records)

    def targets(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(self.classes, 0)
        for r in self.records:
            counts[self.classes[r.target]] += 1
        return counts

    def balance(self) -> ClassBalance:
        """Positive/negative example counts; binary scheme only."""
        if self.scheme != COVID_BINARY:
            raise SchemeError(f"class balance is defined for {COVID_BINARY!r}, not {self.scheme!r}")
        t = self.targets()
        return ClassBalance(positives=int((t == 1).sum()), negatives=int((t == 0).sum()))


def read_manifest_rows(path: str | Path) -> list[tuple[str, str]]:
    """(image path, label) pairs from a CSV manifest with header path,label.

    Relative image paths are resolved against the manifest's directory.
    """
    manifest = Path(path)
    base = manifest.parent
    try:
        with open(manifest, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ManifestError(f"{manifest}: empty manifest") from None
            if [h.strip().lower() for h in header] != ["path", "label"]:
                raise ManifestError(f"{manifest}: header must be 'path,label', got {header}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 2:
                    raise ManifestError(f"{manifest}:{lineno}: expected 2 fields, got {len(row)}")
                img_path, label = row[0].strip(), row[1].strip()
                if not img_path or not label:
                    raise ManifestError(f"{manifest}:{lineno}: empty path or label")
                resolved = Path(img_path)
                if not resolved.is_absolute():
                    resolved = base / resolved
                rows.append((str(resolved), label))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest}: {exc}") from exc
    return rows


def map_covid_labels(rows: Iterable[tuple[str, str]]) -> list[ManifestRecord]:
    records = []
    for img_path, label in rows:
        norm = normalize_label(label)
        if norm == _COVID_POSITIVE:
            target = 1
        elif norm in _COVID_NEGATIVES:
            target = 0
        else:
            raise VocabularyError(
                f"label {label!r} is not in the COVID vocabulary "
                f"({_COVID_POSITIVE!r} or one of {_COVID_NEGATIVES})"
            )
        records.append(ManifestRecord(path=img_path, label=label, target=target))
    return records


def map_nih_labels(rows: Iterable[tuple[str, str]]) -> tuple[list[ManifestRecord], int]:
    """Map fine pathology labels to the five categories.

    Rows whose label field contains ``|`` describe several findings at
    once; they are dropped, and the count of dropped rows is returned
    alongside the surviving records.
    """
    records = []
    dropped = 0
    for img_path, label in rows:
        if "|" in label:
            dropped += 1
            continue
        norm = normalize_label(label)
        if norm not in _NIH_LOOKUP:
            raise VocabularyError(f"label {label!r} is not one of the 15 known pathology labels")
        records.append(ManifestRecord(path=img_path, label=label, target=_NIH_LOOKUP[norm]))
    return records, dropped


def load_dataset(manifest_path: str | Path, scheme: str) -> DatasetManifest:
    rows = read_manifest_rows(manifest_path)
    if scheme == COVID_BINARY:
        return DatasetManifest(scheme=scheme, records=map_covid_labels(rows))
    if scheme == NIH_5CLASS:
        records, dropped = map_nih_labels(rows)
        return DatasetManifest(scheme=scheme, records=records, dropped_multilabel=dropped)
    raise SchemeError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")


def split_train_val(
    records: Sequence[ManifestRecord], val_fraction: float = 0.1, seed: int = 0
) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Stratified split: each class contributes ~val_fraction to validation.

    Every class keeps at least one record on each side, so classes with a
    single example are rejected.
    """
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    by_class: dict[int, list[ManifestRecord]] = {}
    for r in records:
        by_class.setdefault(r.target, []).append(r)
    if not by_class:
        raise SplitError("cannot split an empty record list")

    train: list[ManifestRecord] = []
    val: list[ManifestRecord] = []
    for target in sorted(by_class):
        group = by_class[target]
        n = len(group)
        if n < 2:
            raise SplitError(f"class {target} has {n} record(s); need at least 2 to split")
        n_val = int(round(n * val_fraction))
        n_val = min(max(n_val, 1), n - 1)
        order = np.random.default_rng([seed & 0xFFFFFFFF, target]).permutation(n)
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


# ---------------------------------------------------------------------------
# image preprocessing
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    """Single luminance channel in [0, 1] from a decoded image array."""
    if np.issubdtype(arr.dtype, np.integer):
        scale = float(np.iinfo(arr.dtype).max)
        arr = arr.astype(np.float64) / scale
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return np.clip(arr, 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[:, :, :3]
        return np.clip(rgb @ _LUMA, 0.0, 1.0)
    raise ImageReadError(f"unsupported image array shape {arr.shape}")


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D array.

    Sample positions use half-pixel centers (src = (dst + 0.5) * scale -
    0.5); positions past the border clamp to the edge row/column.
    """
    if img.ndim != 2:
        raise ImageReadError(f"expected a 2-D image, got shape {img.shape}")
    in_h, in_w = img.shape
    if out_h < 1 or out_w < 1:
        raise ImageReadError(f"output size must be positive, got {out_h}x{out_w}")
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)

    img = img.astype(np.float64)
    top = img[np.ix_(y0c, x0c)] * (1.0 - wx) + img[np.ix_(y0c, x1c)] * wx
    bottom = img[np.ix_(y1c, x0c)] * (1.0 - wx) + img[np.ix_(y1c, x1c)] * wx
    return top * (1.0 - wy) + bottom * wy


def preprocess_image(path: str | Path, size: int | tuple[int, int] = 128) -> np.ndarray:
    """Decode one image to a (1, h, w) float32 array in [0, 1].

    ``size`` is either one side of a square or an explicit (h, w) pair.
    """
    out_h, out_w = (size, size) if isinstance(size, int) else size
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    gray = to_grayscale(arr)
    resized = bilinear_resize(gray, out_h, out_w)
    return resized.astype(np.float32)[None, :, :]


def load_batch(
    records: Sequence[ManifestRecord],
    indices: Optional[Sequence[int]] = None,
    size: int | tuple[int, int] = 128,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack preprocessed images for the given records.

    Returns (images (B, 1, h, w) float32, targets (B,), original labels).
    """
    chosen = records if indices is None else [records[i] for i in indices]
    if not chosen:
        raise SplitError("cannot load an empty batch")
    images = np.stack([preprocess_image(r.path, size) for r in chosen])
    targets = np.array([r.target for r in chosen], dtype=np.int64)
    labels = [r.label for r in chosen]
    return images, targets, labels
