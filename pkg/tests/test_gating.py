import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcsmoe import dataset as ds
from gcsmoe import gcs
from gcsmoe.gating import (
    StepNetwork,
    mask_direct,
    mask_stepnet,
    masks_direct,
    masks_stepnet,
    surpass_count,
    train_fam,
)
from gcsmoe.nn import TrainConfig, softmax


def test_surpass_examples():
    assert surpass_count([0.1, 0.4, 0.3, 0.2], 1) == 3
    assert surpass_count([0.25] * 4, 0) == 3
    assert surpass_count([0.4, 0.4, 0.2], 1) == 1


def test_mask_examples():
    P = [0.1, 0.4, 0.3, 0.2]
    assert mask_direct(P, 2).tolist() == [0, 1, 1, 0]
    assert mask_stepnet(P, 2).tolist() == [0, 1, 1, 0]
    assert mask_direct([0.4, 0.4, 0.2], 2).tolist() == [1, 1, 0]
    assert mask_stepnet([0.9, 0.1], 1).tolist() == [1, 0]
    assert mask_direct([0.3, 0.1, 0.6], 3).tolist() == [1, 1, 1]


@pytest.mark.parametrize("S", [0, 5, -1])
def test_width_out_of_range(S):
    with pytest.raises(ValueError, match="S"):
        mask_direct([0.25] * 4, S)
    with pytest.raises(ValueError, match="S"):
        mask_stepnet([0.25] * 4, S)


probs = st.integers(2, 7).flatmap(
    lambda M: st.lists(st.integers(0, 6), min_size=M, max_size=M).map(lambda v: np.array(v, float) + 0.5)
)


@settings(max_examples=200, deadline=None)
@given(P=probs, data=st.data())
def test_exact_s_with_ties(P, data):
    # coarse integer levels produce many ties
    S = data.draw(st.integers(1, len(P)))
    a = mask_direct(P, S)
    assert a.sum() == S
    np.testing.assert_array_equal(mask_stepnet(P, S), a)
    np.testing.assert_array_equal(masks_direct(P[None], S)[0], a)


@settings(max_examples=200, deadline=None)
@given(P=probs, data=st.data())
def test_total_order_oracle(P, data):
    S = data.draw(st.integers(1, len(P)))
    ranked = sorted(range(len(P)), key=lambda i: (-P[i], i))
    expected = np.zeros(len(P), dtype=int)
    expected[ranked[:S]] = 1
    np.testing.assert_array_equal(mask_direct(P, S), expected)


def test_strict_form_on_ties_may_underselect():
    P = [0.25] * 4
    assert mask_stepnet(P, 2, tie_break=False).sum() == 0
    assert mask_stepnet(P, 2).sum() == 2


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 6), data=st.data())
def test_strict_form_agrees_without_ties(seed, M, data):
    S = data.draw(st.integers(1, M))
    P = np.random.default_rng(seed).dirichlet(np.ones(M))
    np.testing.assert_array_equal(mask_stepnet(P, S, tie_break=False), mask_direct(P, S))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 6), bump=st.floats(0.0, 1.0), data=st.data())
def test_raising_entry_never_drops_it(seed, M, bump, data):
    S = data.draw(st.integers(1, M))
    Q = data.draw(st.integers(0, M - 1))
    P = np.random.default_rng(seed).dirichlet(np.ones(M))
    before = mask_direct(P, S)[Q]
    P2 = P.copy()
    P2[Q] += bump
    assert mask_direct(P2, S)[Q] >= before


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 6), c=st.floats(0.05, 20.0), data=st.data())
def test_logit_scale_keeps_mask(seed, M, c, data):
    S = data.draw(st.integers(1, M))
    z = np.random.default_rng(seed).normal(size=M)
    a = mask_direct(softmax(z), S)
    b = mask_direct(softmax(c * z), S)
    np.testing.assert_array_equal(a, b)


def test_stepnet_weights_small_case():
    net = StepNetwork(3, 2)
    np.testing.assert_array_equal(net.w1(1), [[-1, 1, 0], [0, 1, -1]])
    np.testing.assert_array_equal(net.w2, [[1, 1]])
    assert net.bias == -1


def separated_blocks(seed=0):
    # classes {0,1} around one corner, {2,3} around the opposite one
    spec = ds.GeneratorSpec(4, 4, 60, 1.0, ((0, 1, 0.6), (2, 3, 0.6)), seed, 12.0, 40)
    return spec, ds.generate(spec)


def test_fam_separates_super_classes():
    spec, (train, test) = separated_blocks()
    part = gcs.Partition((0, 0, 1, 1), 2)
    centers = ds.class_centers(spec)
    # nearest-center oracle: the generated blocks are separable by their members' centers
    nearest = np.linalg.norm(test.features[:, None] - centers[None], axis=2).argmin(axis=1)
    oracle = (np.array(part.assignment)[nearest] == np.array(part.assignment)[test.labels]).mean()
    assert oracle >= 0.95
    fam = train_fam(train, part, TrainConfig(epochs=20, learning_rate=0.01, seed=1), hidden=(16,))
    pred = fam.predict_proba(test.features).argmax(axis=1)
    assert (pred == np.array(part.assignment)[test.labels]).mean() >= 0.95


def test_fam_is_deterministic():
    _, (train, _) = separated_blocks()
    part = gcs.Partition((0, 1, 0, 1), 2)
    cfg = TrainConfig(epochs=3, seed=4)
    a = train_fam(train, part, cfg, hidden=(8,))
    b = train_fam(train, part, cfg, hidden=(8,))
    for p, q in zip(a.model.params(), b.model.params()):
        np.testing.assert_array_equal(p, q)


def test_fam_rejects_empty_super_class():
    _, (train, _) = separated_blocks()
    sub = train.subset(train.labels < 2)
    part = gcs.Partition((0, 0, 1, 1), 2)
    with pytest.raises(ValueError, match="super-class 1 has no training samples"):
        train_fam(sub, part, TrainConfig(epochs=1))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 7), data=st.data())
def test_batched_forms_match_single(seed, M, data):
    S = data.draw(st.integers(1, M))
    rng = np.random.default_rng(seed)
    # coarse grid forces plenty of ties
    P = rng.integers(0, 3, size=(20, M)).astype(float)
    for tie_break in (True, False):
        batch = masks_stepnet(P, S, tie_break)
        assert np.array_equal(batch, np.stack([mask_stepnet(p, S, tie_break) for p in P]))
    assert np.array_equal(masks_direct(P, S), np.stack([mask_direct(p, S) for p in P]))
