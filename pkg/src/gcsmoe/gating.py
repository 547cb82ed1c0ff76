"""Coarse-grained gating: super-class scorer and the S-hot expert mask.

The mask keeps the ``S`` experts whose super-class probabilities are
largest. It is computed two ways: directly from surpass counts, and by
evaluating a fixed two-layer network of step units whose first layer
compares ``P_Q`` against every other entry and whose second layer counts
the wins and thresholds them at ``M - S``.

Ties are resolved by a total order on ``(value, index)``: of two equal
probabilities the one with the lower index wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LabeledDataset
from .gcs import Partition
from .nn import MlpModel, TrainConfig, train_classifier


def _check_width(M: int, S: int) -> None:
    if not 1 <= S <= M:
        raise ValueError(f"selection width S must satisfy 1 <= S <= M={M}, got S={S}")


def surpass_count(P, Q: int) -> int:
    """Number of entries ``P_Q`` beats under the (value, index) order."""
    P = np.asarray(P, dtype=np.float64)
    others = np.arange(len(P)) != Q
    wins = (P[Q] > P) | ((P[Q] == P) & (Q < np.arange(len(P))))
    return int((wins & others).sum())


def mask_direct(P, S: int) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    M = len(P)
    _check_width(M, S)
    u = np.array([surpass_count(P, Q) for Q in range(M)])
    return (u >= M - S).astype(np.int64)


def surpass_counts(P: np.ndarray) -> np.ndarray:
    """Batched :func:`surpass_count`: ``(n, M)`` probabilities to ``(n, M)`` counts."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    idx = np.arange(P.shape[1])
    a, b = P[:, :, None], P[:, None, :]
    wins = (a > b) | ((a == b) & (idx[:, None] < idx[None, :]))
    return wins.sum(axis=2)


def masks_direct(P: np.ndarray, S: int) -> np.ndarray:
    """Row-wise :func:`mask_direct` for a ``(n, M)`` batch."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    M = P.shape[1]
    _check_width(M, S)
    return (surpass_counts(P) >= M - S).astype(np.int64)


@dataclass(frozen=True)
class StepNetwork:
    """Fixed weights of the comparison network for ``M`` inputs, width ``S``."""

    M: int
    S: int

    def __post_init__(self):
        _check_width(self.M, self.S)

    def others(self, Q: int) -> list[int]:
        return [v for v in range(self.M) if v != Q]

    def w1(self, Q: int) -> np.ndarray:
        """``(M-1, M)``: row ``r`` computes ``P_Q - P_v`` for the r-th other index."""
        W = np.zeros((self.M - 1, self.M))
        for r, v in enumerate(self.others(Q)):
            W[r, Q] = 1.0
            W[r, v] = -1.0
        return W

    @property
    def w2(self) -> np.ndarray:
        return np.ones((1, self.M - 1))

    @property
    def bias(self) -> float:
        return -float(self.M - self.S)

    def output(self, P, Q: int, tie_break: bool = True) -> int:
        P = np.asarray(P, dtype=np.float64)
        diffs = self.w1(Q) @ P
        if tie_break:
            # a tied comparison fires only for the lower index
            lower = np.array([Q < v for v in self.others(Q)])
            hidden = (diffs > 0) | ((diffs == 0) & lower)
        else:
            hidden = diffs > 0
        # small-integer sums are exact in float64; the outer unit fires at >= 0
        count = float((self.w2 @ hidden.astype(np.float64))[0])
        return int(count + self.bias >= 0)


def mask_stepnet(P, S: int, tie_break: bool = True) -> np.ndarray:
    """Evaluate the step network once per output, reusing the same layers.

    With ``tie_break=False`` a comparison unit fires only on a strictly
    positive difference; that form agrees with :func:`mask_direct` whenever
    the entries of ``P`` are pairwise distinct, but may select fewer than
    ``S`` experts on tied inputs.
    """
    P = np.asarray(P, dtype=np.float64)
    net = StepNetwork(len(P), S)
    return np.array([net.output(P, Q, tie_break) for Q in range(len(P))], dtype=np.int64)


class SuperClassScorer:
    """Classifier over super-class labels; ``predict_proba`` gives ``P``."""

    def __init__(self, model: MlpModel):
        self.model = model

    @property
    def M(self) -> int:
        return self.model.n_classes

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(X)

    def masks(self, X: np.ndarray, S: int) -> np.ndarray:
        return masks_direct(self.predict_proba(X), S)


def super_labels(labels: np.ndarray, partition: Partition) -> np.ndarray:
    return np.asarray(partition.assignment, dtype=np.int64)[labels]


def train_fam(
    train: LabeledDataset,
    partition: Partition,
    config: TrainConfig,
    hidden: tuple[int, ...] = (64, 32),
) -> SuperClassScorer:
    if partition.n != train.num_classes:
        raise ValueError(f"partition covers {partition.n} classes, dataset has {train.num_classes}")
    y = super_labels(train.labels, partition)
    present = np.bincount(y, minlength=partition.M)
    for q in range(partition.M):
        if present[q] == 0:
            raise ValueError(f"super-class {q} has no training samples")
    model, _ = train_classifier(train.features, y, partition.M, hidden, config)
    return SuperClassScorer(model)


def masks_stepnet(P: np.ndarray, S: int, tie_break: bool = True) -> np.ndarray:
    """Row-wise :func:`mask_stepnet`, all outputs evaluated with one matmul."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    M = P.shape[1]
    net = StepNetwork(M, S)
    W1 = np.stack([net.w1(Q) for Q in range(M)])  # (M, M-1, M)
    diffs = np.einsum("qrm,nm->nqr", W1, P)
    if tie_break:
        lower = np.array([[Q < v for v in net.others(Q)] for Q in range(M)]).reshape(1, M, M - 1)
        hidden = (diffs > 0) | ((diffs == 0) & lower)
    else:
        hidden = diffs > 0
    count = hidden.astype(np.float64) @ net.w2[0]
    return (count + net.bias >= 0).astype(np.int64)
