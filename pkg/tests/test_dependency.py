import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcsmoe import dataset as ds
from gcsmoe import dependency as dep
from gcsmoe import pipeline as pl
from gcsmoe.nn import TrainConfig


class TableScorer:
    """Returns row ``i`` of a fixed table for the i-th sample (by feature value)."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def predict_proba(self, X):
        return self.table[X[:, 0].astype(int)]


def dataset_for(labels, n):
    labels = np.asarray(labels)
    X = np.arange(len(labels), dtype=float)[:, None]
    return ds.LabeledDataset(X, labels, n, "train")


def test_rank_direct_sort():
    # classes: j=0, a=1, b=2, c=3
    assert dep.rank_classes(np.array([0.7, 0.2, 0.07, 0.03]), 0) == [1, 2, 3]


def test_rank_removes_self_when_misclassified():
    # a=0 wins, true class j=1 second
    assert dep.rank_classes(np.array([0.5, 0.3, 0.15, 0.05]), 1) == [0, 2, 3]


def test_rank_tie_lower_id_first():
    assert dep.rank_classes(np.array([0.6, 0.15, 0.15, 0.1]), 0) == [1, 2, 3]
    assert dep.rank_classes(np.array([0.1, 0.2, 0.2, 0.5]), 3) == [1, 2, 0]


def test_rank_needs_four_classes():
    with pytest.raises(ValueError, match="N >= 4"):
        dep.rank_classes(np.array([0.5, 0.3, 0.2]), 0)


def test_unanimous_mode():
    table = [[0.6, 0.1, 0.2, 0.05, 0.05]] * 3 + [[0.1, 0.5, 0.1, 0.2, 0.1]] * 2
    tally = dep.tally_ranks(TableScorer(table), dataset_for([0, 0, 0, 1, 1], 5))
    deps = dep.dependencies_from_tally(tally)
    assert deps.d2[0] == 2
    assert deps.d2[1] == 3


def test_mode_tie_goes_to_lower_id():
    # class 0: rank-2 tally {3: 5, 2: 5}
    rows = [[0.5, 0.0, 0.1, 0.3, 0.1]] * 5 + [[0.5, 0.0, 0.3, 0.1, 0.1]] * 5
    tally = dep.tally_ranks(TableScorer(rows), dataset_for([0] * 10, 5))
    assert tally.histogram(0, 2)[2] == tally.histogram(0, 2)[3] == 5
    # brute-force tie-break oracle
    hist = tally.histogram(0, 2)
    best = max(hist)
    assert dep.dependencies_from_tally(tally).d2[0] == min(k for k in range(5) if hist[k] == best) == 2


def _row(order):
    row = np.zeros(5)
    row[list(order)] = [0.5, 0.25, 0.15, 0.07, 0.03]
    return row


def test_orders_are_distinct_with_fallback():
    # rank-3 mode is class 1, which already is d2; d3 falls back to the runner-up
    rows = [_row((0, 1, 2, 3, 4))] * 2 + [_row((0, 2, 1, 3, 4)), _row((0, 3, 1, 2, 4)), _row((0, 4, 1, 2, 3))]
    tally = dep.tally_ranks(TableScorer(rows), dataset_for([0] * 5, 5))
    assert tally.histogram(0, 3).argmax() == 1
    deps = dep.dependencies_from_tally(tally)
    assert (deps.d2[0], deps.d3[0], deps.d4[0]) == (1, 2, 3)


def test_empty_class_rejected():
    with pytest.raises(ValueError, match="class 2 has no training samples"):
        dep.compute_dependencies(TableScorer(np.full((3, 4), 0.25)), dataset_for([0, 1, 3], 4))


def test_three_classes_rejected():
    with pytest.raises(ValueError, match="N >= 4"):
        dep.compute_dependencies(TableScorer(np.full((3, 3), 1 / 3)), dataset_for([0, 1, 2], 3))


def test_constructor_invariants():
    with pytest.raises(ValueError, match="itself"):
        dep.DependencySets((0, 0, 1, 2), (1, 2, 3, 0), (2, 3, 0, 1))
    with pytest.raises(ValueError, match="outside"):
        dep.DependencySets((1, 0, 9, 2), (2, 2, 3, 0), (3, 3, 0, 1))
    with pytest.raises(ValueError, match="equal length"):
        dep.DependencySets((1, 0), (1,), (1, 0))
    repeat = dep.DependencySets((1, 0, 3, 2), (1, 2, 0, 1), (2, 3, 1, 0))
    assert not repeat.is_distinct()


def per_class_orderings(n, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for j in range(n):
        others = [k for k in range(n) if k != j]
        order = [j] + list(rng.permutation(others))
        row = np.zeros(n)
        row[order] = np.linspace(1.0, 0.1, n)
        rows.append(row / row.sum())
    return np.array(rows)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(4, 9), seed=st.integers(0, 10_000), pseed=st.integers(0, 10_000))
def test_permutation_equivariance(n, seed, pseed):
    table = per_class_orderings(n, seed)
    labels = np.repeat(np.arange(n), 3)
    base = dep.compute_dependencies(TableScorer(table[labels]), dataset_for(labels, n))
    assert base.is_distinct()
    pi = np.random.default_rng(pseed).permutation(n)
    permuted = np.zeros_like(table)
    permuted[:, pi] = table
    moved = dep.compute_dependencies(TableScorer(permuted[labels]), dataset_for(pi[labels], n))
    for o in (2, 3, 4):
        for j in range(n):
            assert moved.order(o)[pi[j]] == pi[base.order(o)[j]]


def test_determinism():
    table = per_class_orderings(6, 1)
    labels = np.repeat(np.arange(6), 4)
    a = dep.compute_dependencies(TableScorer(table[labels]), dataset_for(labels, 6))
    b = dep.compute_dependencies(TableScorer(table[labels]), dataset_for(labels, 6))
    assert a == b


def test_planted_pair_recovered():
    spec = ds.GeneratorSpec(6, 6, 60, 1.0, ((0, 1, 0.85),), seed=2, test_per_class=5)
    centers = ds.class_centers(spec)
    # Bayes oracle with shared unit covariance: the closest other center is the likeliest confusion
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    assert dist[0].argmin() == 1 and dist[1].argmin() == 0
    train, _ = ds.generate(spec)
    cfg = pl.PipelineConfig(baseline=TrainConfig(epochs=20, learning_rate=0.05), baseline_hidden=(32,))
    deps = dep.compute_dependencies(pl.train_baseline(train, cfg), train)
    assert deps.d2[0] == 1 and deps.d2[1] == 0
    assert deps.is_distinct()


GOLDEN = "0 1 2 3\n1 0 3 2\n2 3 0 1\n3 2 1 0\n"


def test_file_golden(tmp_path):
    deps = dep.loads(GOLDEN)
    assert deps.d2 == (1, 0, 3, 2) and deps.d4 == (3, 2, 1, 0)
    assert dep.dumps(deps) == GOLDEN
    dep.save(deps, tmp_path / "d.txt")
    assert dep.load(tmp_path / "d.txt") == deps


@pytest.mark.parametrize(
    "text", ["0 1 2\n", "0 1 2 x\n", "0 1 2 3\n0 1 2 3\n", "1 0 2 3\n", "0 0 2 3\n1 0 2 3\n2 0 1 3\n3 0 1 2\n"]
)
def test_bad_files(text):
    with pytest.raises(ValueError):
        dep.loads(text)
