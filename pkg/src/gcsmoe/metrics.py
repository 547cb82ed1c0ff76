"""Ranking metrics and similarity-conditioned pair errors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import LabeledDataset
from .gcs import SimilarityCensus
from .nn import Scorer, TrainConfig, train_classifier


def _ranked(scores: np.ndarray) -> np.ndarray:
    # descending score; a stable sort keeps lower sample index first on ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of every positive.

    Returns NaN (with a warning) when there are no positives.
    """
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        warnings.warn("average precision undefined without positives", RuntimeWarning, stacklevel=2)
        return math.nan
    rel = labels[_ranked(scores)]
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float((hits[rel] / ranks[rel]).sum() / rel.sum())


def pr_points(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) after each position of the descending ranking."""
    labels = np.asarray(labels).astype(bool)
    rel = labels[_ranked(scores)]
    hits = np.cumsum(rel)
    total = max(int(rel.sum()), 1)
    return [(float(h / total), float(h / (k + 1))) for k, h in enumerate(hits)]


@dataclass
class EvalReport:
    ap: dict[int, float]
    mAP: float
    accuracy: float
    head_mAP: float
    tail_mAP: float
    train_counts: dict[int, int]
    head_classes: list[int]
    pair_errors: dict[int, float | None] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)


def _mean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def map_report(
    scorer: Scorer,
    test: LabeledDataset,
    train_counts: dict[int, int],
    config: dict[str, str] | None = None,
) -> EvalReport:
    probs = scorer.predict_proba(test.features)
    n = test.num_classes
    if probs.shape[1] != n:
        raise ValueError(f"scorer covers {probs.shape[1]} classes, test set has {n}")
    ap = {}
    for c in range(n):
        positives = test.labels == c
        if not positives.any():
            warnings.warn(f"class {c} absent from test set; excluded from mAP", RuntimeWarning)
            ap[c] = math.nan
            continue
        ap[c] = average_precision(probs[:, c], positives)
    counts = np.array([train_counts.get(c, 0) for c in range(n)])
    median = float(np.median(counts))
    head = [c for c in range(n) if counts[c] >= median]
    tail = [c for c in range(n) if counts[c] < median]
    acc = float((probs.argmax(axis=1) == test.labels).mean()) if len(test) else math.nan
    return EvalReport(
        ap=ap,
        mAP=_mean(ap.values()),
        accuracy=acc,
        head_mAP=_mean(ap[c] for c in head),
        tail_mAP=_mean(ap[c] for c in tail),
        train_counts={c: int(counts[c]) for c in range(n)},
        head_classes=head,
        config=dict(config or {}),
    )


# ---------------------------------------------------------------------------
# pair errors

PairFactory = Callable[[np.ndarray, np.ndarray, TrainConfig], Scorer]


def default_pair_factory(hidden: Sequence[int] = (16,)) -> PairFactory:
    def factory(X, y, config):
        model, _ = train_classifier(X, y, 2, hidden, config)
        return model

    return factory


def _pair_seed(seed: int, j: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, j, k]).generate_state(1)[0])


def pair_error(
    dataset: LabeledDataset,
    pair: tuple[int, int],
    config: TrainConfig,
    factory: PairFactory | None = None,
) -> float:
    """Held-out cross-entropy of a fresh binary classifier for one class pair.

    Each class's samples are shuffled and split in half; the classifier is
    trained on one half and the mean ``-log p(true)`` is taken on the other.
    """
    j, k = sorted(pair)
    factory = factory or default_pair_factory()
    seed = _pair_seed(config.seed, j, k)
    rng = np.random.default_rng(seed)
    fit_idx, hold_idx = [], []
    for c in (j, k):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 4:
            raise ValueError(f"class {c} has {len(idx)} samples; pair errors need at least 4")
        idx = rng.permutation(idx)
        half = len(idx) // 2
        fit_idx.append(idx[:half])
        hold_idx.append(idx[half:])
    fit_idx, hold_idx = np.concatenate(fit_idx), np.concatenate(hold_idx)
    y = (dataset.labels == k).astype(np.int64)
    cfg = TrainConfig(**{**config.__dict__, "seed": seed})
    scorer = factory(dataset.features[fit_idx], y[fit_idx], cfg)
    p = scorer.predict_proba(dataset.features[hold_idx])
    p_true = np.clip(p[np.arange(len(hold_idx)), y[hold_idx]], 1e-300, 1.0)
    return float(-np.log(p_true).mean())


def no_similarity_pairs(cen: SimilarityCensus) -> list[tuple[int, int]]:
    related = cen.related_pairs()
    return [
        (j, k) for j in range(cen.n) for k in range(j + 1, cen.n) if frozenset((j, k)) not in related
    ]


def similarity_error_table(
    cen: SimilarityCensus,
    dataset: LabeledDataset,
    config: TrainConfig,
    factory: PairFactory | None = None,
    max_dissimilar: int = 20,
) -> dict[int, float | None]:
    """Mean pair error per similarity type; key 0 is "no similarity".

    Types with no pairs map to ``None``. Dissimilar pairs are subsampled
    (seeded) to at most ``max_dissimilar``.
    """
    cache: dict[tuple[int, int], float] = {}

    def err(pair):
        key = tuple(sorted(pair))
        if key not in cache:
            cache[key] = pair_error(dataset, key, config, factory)
        return cache[key]

    table: dict[int, float | None] = {}
    for t in range(1, 5):
        pairs = cen.pairs(t)
        table[t] = float(np.mean([err(p) for p in pairs])) if pairs else None
    zero = no_similarity_pairs(cen)
    if len(zero) > max_dissimilar:
        rng = np.random.default_rng([config.seed, 0xE0])
        pick = sorted(rng.choice(len(zero), size=max_dissimilar, replace=False))
        zero = [zero[i] for i in pick]
    table[0] = float(np.mean([err(p) for p in zero])) if zero else None
    return {t: table[t] for t in range(5)}


# ---------------------------------------------------------------------------
# metrics file


def _f(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.6f}"


def dumps_report(report: EvalReport) -> str:
    lines = [f"# config {k}={v}" for k, v in sorted(report.config.items())]
    lines.append("# class_id AP train_count")
    for c in sorted(report.ap):
        lines.append(f"{c} {_f(report.ap[c])} {report.train_counts.get(c, 0)}")
    lines += [
        f"mAP {_f(report.mAP)}",
        f"accuracy {_f(report.accuracy)}",
        f"head_mAP {_f(report.head_mAP)}",
        f"tail_mAP {_f(report.tail_mAP)}",
        "E_t",
    ]
    for t in range(5):
        v = report.pair_errors.get(t)
        lines.append(f"E_{t} {'absent' if v is None else _f(v)}")
    return "\n".join(lines) + "\n"


def loads_summary(text: str) -> dict[str, float]:
    """Summary lines (``mAP``, ``accuracy``, ...) of a metrics file."""
    out = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 2 and not parts[0][0].isdigit() and parts[1] != "absent":
            out[parts[0]] = float(parts[1])
    return out


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(dumps_report(report))


def dumps_pr_points(scorer: Scorer, test: LabeledDataset) -> str:
    probs = scorer.predict_proba(test.features)
    lines = ["# class_id recall precision"]
    for c in range(test.num_classes):
        positives = test.labels == c
        if not positives.any():
            continue
        lines += [f"{c} {r:.6f} {p:.6f}" for r, p in pr_points(probs[:, c], positives)]
    return "\n".join(lines) + "\n"
