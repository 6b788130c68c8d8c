"""Synthetic and CSV datasets, vertically split across participants."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from vfl_lab.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (K, D)
    labels: np.ndarray  # (K,) int
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree on sample count")
        if self.features.shape[0] < 1:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels outside [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    """Contiguous column ranges ``[start, end)`` owned by each participant."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.ranges) < 2:
            raise ConfigurationError("vertical partition needs at least 2 participants")
        pos = 0
        for start, end in self.ranges:
            if start != pos or end <= start:
                raise ConfigurationError(f"ranges must be ordered, contiguous and non-empty: {self.ranges}")
            pos = end

    @property
    def n_participants(self) -> int:
        return len(self.ranges)

    @property
    def n_features(self) -> int:
        return self.ranges[-1][1]

    def widths(self) -> list[int]:
        return [end - start for start, end in self.ranges]

    def split(self, features: np.ndarray) -> list[np.ndarray]:
        if features.shape[1] != self.n_features:
            raise DataError(f"{features.shape[1]} columns, partition expects {self.n_features}")
        return [np.ascontiguousarray(features[:, s:e]) for s, e in self.ranges]


@dataclass(frozen=True)
class Split:
    """One row subset, already cut into per-participant blocks."""

    blocks: tuple[np.ndarray, ...]
    labels: np.ndarray
    index: np.ndarray  # row ids in the source dataset

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    def joined(self) -> np.ndarray:
        return np.concatenate(self.blocks, axis=1)

    def take(self, rows: np.ndarray) -> "Split":
        rows = np.asarray(rows, dtype=np.int64)
        return Split(tuple(b[rows] for b in self.blocks), self.labels[rows], self.index[rows])


@dataclass(frozen=True)
class PartitionedDataset:
    train: Split
    test: Split
    aux: Split
    spec: PartitionSpec
    n_classes: int

    @property
    def n_participants(self) -> int:
        return self.spec.n_participants


def generate_synthetic(
    n_classes: int = 5,
    dim: int = 40,
    k_train: int = 8000,
    k_test: int = 2000,
    k_aux: int = 500,
    separation: float = 2.0,
    noise_std: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian class prototypes plus isotropic noise.

    Each class gets a prototype drawn from N(0, separation^2) in every column,
    so all feature blocks carry (correlated) class information. Rows are
    returned in shuffled order with class counts balanced to within one.
    """
    total = k_train + k_test + k_aux
    if min(k_train, k_test, k_aux) < 1:
        raise ConfigurationError("sample counts must all be >= 1")
    if n_classes < 2 or dim < 1:
        raise ConfigurationError("need n_classes >= 2 and dim >= 1")
    if separation <= 0 or noise_std < 0:
        raise ConfigurationError("separation must be > 0 and noise_std >= 0")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, separation, size=(n_classes, dim))
    labels = rng.permutation(np.arange(total) % n_classes)
    features = prototypes[labels] + noise_std * rng.standard_normal((total, dim))
    return Dataset(features, labels.astype(np.int64), n_classes)


def load_csv(path: str | PathLike, label_column: str, n_classes: int) -> Dataset:
    """Read a headered CSV; min-max scale every feature column to [0, 1].

    Labels are mapped to ids in order of first appearance. A constant column
    maps to all zeros.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column)
        feature_names = [h for k, h in enumerate(header) if k != label_pos]
        rows, raw_labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(record)}")
            values = []
            for k, cell in enumerate(record):
                if k == label_pos:
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{line_no}: column {header[k]!r} has non-numeric value {cell!r}"
                    ) from None
            rows.append(values)
            raw_labels.append(record[label_pos].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")

    ids: dict[str, int] = {}
    labels = np.array([ids.setdefault(lab, len(ids)) for lab in raw_labels], dtype=np.int64)
    if len(ids) != n_classes:
        raise DataError(f"{path}: found {len(ids)} distinct labels in {label_column!r}, expected {n_classes}")

    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_names))
    if not np.all(np.isfinite(x)):
        raise DataError(f"{path}: non-finite feature values")
    return minmax_normalize(Dataset(x, labels, n_classes))


def even_partition(n_features: int, n_participants: int) -> PartitionSpec:
    """Near-equal contiguous blocks; the first ``D mod N`` blocks get one extra column."""
    if n_participants < 2:
        raise ConfigurationError("need at least 2 participants")
    if n_participants > n_features:
        raise ConfigurationError(f"{n_participants} participants but only {n_features} features")
    base, extra = divmod(n_features, n_participants)
    ranges, pos = [], 0
    for i in range(n_participants):
        width = base + (1 if i < extra else 0)
        ranges.append((pos, pos + width))
        pos += width
    return PartitionSpec(tuple(ranges))


def partition_vertical(
    dataset: Dataset,
    n_participants: int,
    split_fractions: Sequence[float] = (0.8, 0.16, 0.04),
    seed: int = 0,
) -> PartitionedDataset:
    """Split columns across participants and rows into train/test/aux.

    Row order is shared by all participants within a split, so row ``r`` of
    every block refers to the same sample.
    """
    fractions = [float(f) for f in split_fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ConfigurationError(f"split_fractions must be 3 non-negative values summing to 1, got {fractions}")
    spec = even_partition(dataset.n_features, n_participants)
    k = dataset.n_samples
    n_train = int(round(fractions[0] * k))
    n_test = int(round(fractions[1] * k))
    n_test = min(n_test, k - n_train)
    order = np.random.default_rng(seed).permutation(k)
    parts = np.split(order, [n_train, n_train + n_test])

    blocks = spec.split(dataset.features)

    def make(rows: np.ndarray) -> Split:
        return Split(tuple(b[rows] for b in blocks), dataset.labels[rows], rows)

    train, test, aux = (make(p) for p in parts)
    missing = set(range(dataset.n_classes)) - set(np.unique(train.labels).tolist())
    if missing:
        raise DataError(f"classes {sorted(missing)} absent from the training split")
    return PartitionedDataset(train, test, aux, spec, dataset.n_classes)


def minmax_normalize(dataset: Dataset) -> Dataset:
    """Scale each feature column to [0, 1]; constant columns become 0."""
    x = dataset.features
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return Dataset(scaled, dataset.labels, dataset.n_classes)
