"""Second/third/fourth-order class dependencies from a baseline scorer.

For every training image of class ``j`` the baseline's scores are sorted in
descending order with ``j`` itself removed; the classes landing at ranks
2, 3 and 4 are tallied, and the per-class mode of each rank becomes
``d2[j]``, ``d3[j]``, ``d4[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .nn import Scorer

ORDERS = (2, 3, 4)


@dataclass(frozen=True)
class DependencySets:
    d2: tuple[int, ...]
    d3: tuple[int, ...]
    d4: tuple[int, ...]

    def __post_init__(self):
        n = len(self.d2)
        if len(self.d3) != n or len(self.d4) != n:
            raise ValueError("d2, d3 and d4 must have equal length")
        for j in range(n):
            row = (self.d2[j], self.d3[j], self.d4[j])
            for d in row:
                if not 0 <= d < n:
                    raise ValueError(f"class {j}: dependency {d} outside [0, {n})")
                if d == j:
                    raise ValueError(f"class {j}: a class cannot depend on itself")

    @property
    def num_classes(self) -> int:
        return len(self.d2)

    def is_distinct(self) -> bool:
        """True when every class names three different partners.

        :func:`compute_dependencies` always yields distinct sets; hand-written
        sets (such as published worked examples) may repeat a partner.
        """
        return all(len({a, b, c}) == 3 for a, b, c in zip(self.d2, self.d3, self.d4))

    def order(self, o: int) -> tuple[int, ...]:
        return {2: self.d2, 3: self.d3, 4: self.d4}[o]


@dataclass
class RankTally:
    # counts[r - 2, j, k]: how often class k sat at rank r for images of class j
    counts: np.ndarray

    def histogram(self, j: int, rank: int) -> np.ndarray:
        return self.counts[rank - 2, j]


def _ranking(scores: np.ndarray, true_class: int) -> list[int]:
    n = len(scores)
    # descending score, lower class id first on ties
    order = np.lexsort((np.arange(n), -scores))
    return [int(c) for c in order if c != true_class]


def rank_classes(scores: np.ndarray, true_class: int) -> list[int]:
    """Class ids at ranks 2, 3, 4 once ``true_class`` is taken out."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 4:
        raise ValueError(f"need N >= 4 classes for fourth-order dependencies, got N={len(scores)}")
    return _ranking(scores, true_class)[:3]


def tally_ranks(scorer: Scorer, train: LabeledDataset) -> RankTally:
    n = train.num_classes
    if n < 4:
        raise ValueError(f"need N >= 4 classes for fourth-order dependencies, got N={n}")
    probs = scorer.predict_proba(train.features)
    if probs.shape[1] != n:
        raise ValueError(f"scorer covers {probs.shape[1]} classes, dataset has {n}")
    counts = np.zeros((3, n, n), dtype=np.int64)
    for row, j in zip(probs, train.labels):
        for r, k in enumerate(rank_classes(row, int(j))):
            counts[r, j, k] += 1
    return RankTally(counts)


def dependencies_from_tally(tally: RankTally) -> DependencySets:
    """Per-class modes with lowest-id ties and distinct partners across orders."""
    _, n, _ = tally.counts.shape
    out = {2: [], 3: [], 4: []}
    for j in range(n):
        taken = {j}
        for r in ORDERS:
            hist = tally.counts[r - 2, j]
            ranked = np.lexsort((np.arange(n), -hist))
            pick = next(int(k) for k in ranked if k not in taken)
            taken.add(pick)
            out[r].append(pick)
    return DependencySets(tuple(out[2]), tuple(out[3]), tuple(out[4]))


def compute_dependencies(scorer: Scorer, train: LabeledDataset) -> DependencySets:
    present = np.bincount(train.labels, minlength=train.num_classes)
    empty = [c for c in range(train.num_classes) if present[c] == 0]
    if empty:
        raise ValueError(f"class {empty[0]} has no training samples")
    return dependencies_from_tally(tally_ranks(scorer, train))


def dumps(deps: DependencySets) -> str:
    return "".join(
        f"{j} {deps.d2[j]} {deps.d3[j]} {deps.d4[j]}\n" for j in range(deps.num_classes)
    )


def loads(text: str) -> DependencySets:
    rows = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'j d2 d3 d4', got {line!r}")
        try:
            j, *ds = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer field in {line!r}") from None
        if j in rows:
            raise ValueError(f"line {lineno}: class {j} listed twice")
        rows[j] = ds
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValueError("dependency file must list every class 0..N-1 exactly once")
    return DependencySets(*(tuple(rows[j][i] for j in range(n)) for i in range(3)))


def save(deps: DependencySets, path) -> None:
    Path(path).write_text(dumps(deps))


def load(path) -> DependencySets:
    return loads(Path(path).read_text())
