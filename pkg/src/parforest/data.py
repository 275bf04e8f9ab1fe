"""Dataset loading, synthesis, and the seeded train/test split.

The on-disk format is the UCI letter-recognition layout: UTF-8 text, no
header, one sample per line, a single capital-letter label followed by the
numeric features, comma-separated. Indices are 0-based everywhere; labels map
A -> 0 ... Z -> 25.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

LETTER_FEATURE_NAMES = [
    "x.box", "y.box", "width", "high", "onpix", "x.bar", "y.bar", "x2bar",
    "y2bar", "xybar", "x2ybr", "xy2br", "x.ege", "xegvy", "y.ege", "yegvx",
]


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; the message names the offending
    1-based line (and field where applicable)."""


@dataclass(frozen=True)
class CsvFormat:
    """Labeled-CSV descriptor: expected feature count and class count.

    The default is the letter-recognition layout (16 features, 26 classes).
    Datasets written by save_dataset round-trip with
    CsvFormat(n_features=ds.p, n_classes=ds.n_classes).
    """

    n_features: int = 16
    n_classes: int = 26


LETTER_FORMAT = CsvFormat()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable feature matrix (n x p float64) with integer class labels.

    Arrays are marked read-only so the dataset can be shared across
    concurrently executing workers.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: list[str] | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labs = np.ascontiguousarray(self.labels, dtype=np.int32)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, p = feats.shape
        if n < 1 or p < 1:
            raise ValueError(f"dataset must have n >= 1 rows and p >= 1 columns, got {n} x {p}")
        if labs.shape != (n,):
            raise ValueError(f"labels length {labs.shape} does not match {n} rows")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        if labs.min() < 0 or labs.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.feature_names is not None and len(self.feature_names) != p:
            raise ValueError("feature_names length does not match feature count")
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        """New Dataset holding the given rows (indices into this dataset)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       self.feature_names)

    def equals(self, other: "Dataset") -> bool:
        """Exact equality of features, labels, and class count
        (feature names are not compared)."""
        return (self.n_classes == other.n_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class TrainTestSplit:
    """Disjoint sorted row-index sets covering the whole dataset."""

    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self):
        train = np.asarray(self.train_indices, dtype=np.int64)
        test = np.asarray(self.test_indices, dtype=np.int64)
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)


def load_dataset(path, fmt: CsvFormat = LETTER_FORMAT) -> Dataset:
    """Load a labeled CSV file.

    Each line must have exactly 1 + fmt.n_features comma-separated fields:
    a capital-letter label within the first fmt.n_classes letters, then
    numeric features. LF and CRLF line endings are both accepted.
    """
    try:
        with open(path, "r", encoding="utf-8", newline=None) as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise DatasetFormatError(f"dataset file not found: {path}") from None

    rows = []
    labels = []
    expected = 1 + fmt.n_features
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            if lineno == len(lines):
                continue  # trailing blank line
            raise DatasetFormatError(f"line {lineno}: blank line")
        parts = line.split(",")
        if len(parts) != expected:
            raise DatasetFormatError(
                f"line {lineno}: expected {expected} fields, got {len(parts)}")
        tag = parts[0].strip()
        if len(tag) != 1 or not "A" <= tag <= "Z":
            raise DatasetFormatError(
                f"line {lineno}: field 1: label {tag!r} is not a capital letter A-Z")
        label = ord(tag) - ord("A")
        if label >= fmt.n_classes:
            last = chr(ord("A") + fmt.n_classes - 1)
            raise DatasetFormatError(
                f"line {lineno}: field 1: label {tag!r} outside allowed range A-{last}")
        vals = []
        for j, part in enumerate(parts[1:], start=2):
            try:
                v = float(part)
            except ValueError:
                raise DatasetFormatError(
                    f"line {lineno}: field {j}: {part!r} is not numeric") from None
            if not math.isfinite(v):
                raise DatasetFormatError(
                    f"line {lineno}: field {j}: non-finite value {part!r}")
            vals.append(v)
        labels.append(label)
        rows.append(vals)

    if not rows:
        raise DatasetFormatError(f"dataset file is empty: {path}")
    names = LETTER_FEATURE_NAMES if fmt == LETTER_FORMAT else None
    return Dataset(np.array(rows, dtype=np.float64),
                   np.array(labels, dtype=np.int32),
                   fmt.n_classes, names)


def save_dataset(ds: Dataset, path) -> None:
    """Write a Dataset in the labeled-CSV layout (labels A, B, C, ...).

    Integral feature values are written without a decimal point; all values
    round-trip exactly through load_dataset.
    """
    if ds.n_classes > 26:
        raise ValueError("CSV layout supports at most 26 classes (labels A-Z)")

    def fmt_val(v: float) -> str:
        return str(int(v)) if v.is_integer() else repr(v)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(ds.n):
            label = chr(ord("A") + int(ds.labels[i]))
            fields = [label] + [fmt_val(float(v)) for v in ds.features[i]]
            fh.write(",".join(fields) + "\n")


def train_test_split(ds: Dataset, test_frac: float, stream: RngStream) -> TrainTestSplit:
    """Sample round(n * test_frac) distinct test rows without replacement.

    Uses only draws from `stream`, so the split depends on the stream key
    alone, never on what other components have drawn.
    """
    if not 0.0 <= test_frac <= 1.0:
        raise ValueError(f"test_frac must be in [0, 1], got {test_frac}")
    n = ds.n
    k = int(round(n * test_frac))
    test = np.sort(np.array(stream.sample_without_replacement(n, k), dtype=np.int64))
    mask = np.ones(n, dtype=bool)
    mask[test] = False
    train = np.flatnonzero(mask).astype(np.int64)
    return TrainTestSplit(train_indices=train, test_indices=test)


def synth_dataset(n: int, p: int, n_classes: int, stream: RngStream) -> Dataset:
    """Generate a learnable synthetic dataset.

    Labels cycle 0..n_classes-1 (so every class appears); each class has a
    distinct mean vector (uniform base plus a per-class boost on component
    c mod p) and features are the class mean plus uniform noise in [-1, 1).
    Deterministic given the stream key.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n < n_classes:
        raise ValueError(f"need n >= n_classes so every class appears, got {n} < {n_classes}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    centers = stream.uniform_array(n_classes * p).reshape(n_classes, p) * 4.0
    for c in range(n_classes):
        centers[c, c % p] += 6.0 + 2.0 * c
    labels = np.arange(n, dtype=np.int32) % n_classes
    noise = stream.uniform_array(n * p).reshape(n, p) * 2.0 - 1.0
    features = centers[labels] + noise
    return Dataset(features, labels, n_classes)
