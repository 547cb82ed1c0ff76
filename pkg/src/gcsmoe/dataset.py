"""Synthetic long-tailed classification data.

Each class is a unit-covariance Gaussian cluster. Train counts fall
geometrically from ``head_count`` to ``head_count / imbalance_ratio``; the
test split is class-balanced. Confusable pairs are planted by pulling two
class centers together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed or violates its schema."""


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int
    feature_dim: int
    head_count: int
    imbalance_ratio: float = 1.0
    # (j, k, strength): strength 1 makes the two clusters coincide
    confusable_plan: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0
    # typical distance between unrelated class centers
    separation: float = 8.0
    test_per_class: int = 50

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.head_count < 1:
            raise ValueError(f"head_count must be >= 1, got {self.head_count}")
        if not self.imbalance_ratio >= 1.0:
            raise ValueError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.head_count / self.imbalance_ratio < 0.5:
            raise ValueError(
                f"head_count / imbalance_ratio = {self.head_count / self.imbalance_ratio:g} "
                "would leave the smallest class empty"
            )
        if self.test_per_class < 0:
            raise ValueError("test_per_class must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        for entry in self.confusable_plan:
            j, k, strength = entry
            if j == k:
                raise ValueError(f"confusable plan entry {entry}: j and k must differ")
            if not (0 <= j < self.num_classes and 0 <= k < self.num_classes):
                raise ValueError(f"confusable plan entry {entry}: class id out of range")
            if not 0.0 <= strength <= 1.0:
                raise ValueError(f"confusable plan entry {entry}: overlap strength must be in [0, 1]")


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.features.shape == other.features.shape
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    def subset(self, mask_or_index) -> "LabeledDataset":
        return LabeledDataset(
            self.features[mask_or_index], self.labels[mask_or_index], self.num_classes, self.split
        )


def long_tail_counts(num_classes: int, head_count: int, imbalance_ratio: float) -> list[int]:
    """Geometric interpolation from ``head_count`` down to ``head_count / ratio``."""
    if num_classes == 1:
        return [head_count]
    counts = []
    for c in range(num_classes):
        n = head_count * imbalance_ratio ** (-c / (num_classes - 1))
        counts.append(max(1, int(round(n))))
    return counts


def class_centers(spec: GeneratorSpec) -> np.ndarray:
    """Cluster centers for ``spec``; plan entries move ``k`` next to ``j`` in order."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    n, d = spec.num_classes, spec.feature_dim
    scale = spec.separation / np.sqrt(2 * d)
    centers = rng.normal(size=(n, d)) * scale
    # directions drawn up front so a plan entry's strength never perturbs other draws
    directions = rng.normal(size=(max(len(spec.confusable_plan), 1), d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    for (j, k, strength), u in zip(spec.confusable_plan, directions):
        centers[k] = centers[j] + spec.separation * (1.0 - strength) * u
    return centers


def generate(spec: GeneratorSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw a (train, test) pair; deterministic in ``spec.seed``."""
    spec.validate()
    centers = class_centers(spec)
    counts = long_tail_counts(spec.num_classes, spec.head_count, spec.imbalance_ratio)
    rng = np.random.default_rng([spec.seed, 1])

    def draw(per_class, split):
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        noise = rng.normal(size=(len(labels), spec.feature_dim))
        return LabeledDataset(centers[labels] + noise, labels, spec.num_classes, split)

    train = draw(counts, "train")
    test = draw([spec.test_per_class] * spec.num_classes, "test")
    return train, test


def class_counts(dataset: LabeledDataset) -> dict[int, int]:
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    return {c: int(counts[c]) for c in range(dataset.num_classes)}


def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips a float64 exactly
    return repr(float(x))


def dumps(dataset: LabeledDataset) -> str:
    lines = [f"{dataset.num_classes} {dataset.feature_dim} {dataset.split}"]
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(" ".join([str(int(label))] + [_fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def save(dataset: LabeledDataset, path) -> None:
    Path(path).write_text(dumps(dataset))


def loads(text: str) -> LabeledDataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("line 1: missing header 'N d split'")
    header = lines[0].split()
    if len(header) != 3:
        raise DatasetFormatError(f"line 1: header must be 'N d split', got {lines[0]!r}")
    try:
        n_classes, dim = int(header[0]), int(header[1])
    except ValueError:
        raise DatasetFormatError(f"line 1: N and d must be integers, got {lines[0]!r}") from None
    split = header[2]
    if split not in ("train", "test"):
        raise DatasetFormatError(f"line 1: split must be train or test, got {split!r}")

    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 1:
            raise DatasetFormatError(
                f"line {lineno}: expected label plus {dim} features, got {len(parts)} fields"
            )
        try:
            label = int(parts[0])
        except ValueError:
            raise DatasetFormatError(f"line {lineno}, field 1: label {parts[0]!r} is not an integer") from None
        if not 0 <= label < n_classes:
            raise DatasetFormatError(
                f"line {lineno}: schema error, label {label} outside [0, {n_classes})"
            )
        row = []
        for col, tok in enumerate(parts[1:], start=2):
            try:
                v = float(tok)
            except ValueError:
                raise DatasetFormatError(
                    f"line {lineno}, field {col}: {tok!r} is not a number"
                ) from None
            if not np.isfinite(v):
                raise DatasetFormatError(f"line {lineno}, field {col}: non-finite value {tok!r}")
            row.append(v)
        labels.append(label)
        rows.append(row)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return LabeledDataset(features, np.array(labels, dtype=np.int64), n_classes, split)


def load(path) -> LabeledDataset:
    return loads(Path(path).read_text())
