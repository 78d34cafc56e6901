import collections
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protomoco import metrics as mt
from protomoco.metrics import ConfusionCounts, ScoredSample, UndefinedMetricError


def pairwise_auc(samples):
    pos = [s.score for s in samples if s.truth]
    neg = [s.score for s in samples if not s.truth]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_accuracy_examples():
    assert mt.accuracy(ConfusionCounts(tp=5, tn=5)) == 1.0
    assert mt.accuracy(ConfusionCounts(fp=5, fn=5)) == 0.0
    assert mt.accuracy(ConfusionCounts(tp=8, tn=9, fp=2, fn=1)) == pytest.approx(0.85, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        mt.accuracy(ConfusionCounts())


def test_precision_recall_examples():
    assert mt.precision(ConfusionCounts(tp=8, fp=2)) == pytest.approx(0.8)
    assert mt.recall(ConfusionCounts(tp=8, fn=0)) == 1.0
    with pytest.raises(UndefinedMetricError):
        mt.precision(ConfusionCounts(tn=3, fn=2))
    with pytest.raises(UndefinedMetricError):
        mt.recall(ConfusionCounts(fp=1, tn=1))


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=40))
def test_counts_cover_every_sample(pairs):
    predicted, truth = [p for p, _ in pairs], [t for _, t in pairs]
    c = ConfusionCounts.from_predictions(predicted, truth, positive=1)
    assert c.total == len(pairs)


def test_auc_examples():
    separated = [ScoredSample(s, t) for s, t in [(0.9, True), (0.8, True), (0.3, False), (0.1, False)]]
    assert mt.roc_auc(separated) == 1.0
    ties = [ScoredSample(0.4, t) for t in (True, False, True, False, False)]
    assert mt.roc_auc(ties) == 0.5
    with pytest.raises(UndefinedMetricError):
        mt.roc_auc([ScoredSample(0.2, True)])


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_pair_counting(seed):
    gen = np.random.default_rng(seed)
    samples = [ScoredSample(float(gen.integers(0, 6)) / 5, bool(t)) for t in gen.integers(0, 2, 20)]
    if len({s.truth for s in samples}) < 2:
        samples.append(ScoredSample(0.5, not samples[0].truth))
    assert abs(mt.roc_auc(samples) - pairwise_auc(samples)) <= 1e-9


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.booleans()), min_size=2, max_size=30))
def test_auc_property(pairs):
    samples = [ScoredSample(s, t) for s, t in pairs]
    if len({s.truth for s in samples}) < 2:
        return
    assert abs(mt.roc_auc(samples) - pairwise_auc(samples)) <= 1e-9


def test_kfold_examples():
    plan = mt.plan_group_kfold([f"g{i}" for i in range(10)], 10, seed=0)
    assert plan.sizes() == [1] * 10
    plan = mt.plan_group_kfold([f"g{i}" for i in range(37)], 10, seed=4)
    # independent tally of the assignment
    tally = collections.Counter(collections.Counter(plan.assignment.values()).values())
    assert tally == {4: 7, 3: 3}


@given(st.lists(st.integers(0, 60), min_size=2, max_size=120), st.integers(2, 6), st.integers(0, 100))
def test_kfold_partition(groups, k, seed):
    if len(set(groups)) < k:
        with pytest.raises(ValueError):
            mt.plan_group_kfold(groups, k, seed)
        return
    plan = mt.plan_group_kfold(groups, k, seed)
    assert set(plan.assignment) == set(groups)
    members = [g for f in range(k) for g in plan.groups_in(f)]
    assert len(members) == len(set(members))
    assert max(plan.sizes()) - min(plan.sizes()) <= 1


def test_kfold_strata_spread_evenly():
    groups = [f"a{i}" for i in range(10)] + [f"b{i}" for i in range(10)]
    strata = {g: g[0] for g in groups}
    plan = mt.plan_group_kfold(groups, 10, seed=3, strata=strata)
    for f in range(10):
        assert sorted(g[0] for g in plan.groups_in(f)) == ["a", "b"]


def test_aggregate():
    assert mt.aggregate([1, 1, 1]) == (1.0, 0.0)
    mean, std = mt.aggregate([0, 2])
    assert mean == 1.0 and std == pytest.approx(math.sqrt(2))
    values = np.random.default_rng(0).uniform(size=10).tolist()
    m = sum(values) / 10
    s = math.sqrt(sum((v - m) ** 2 for v in values) / 9)
    assert mt.aggregate(values) == pytest.approx((m, s), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        mt.aggregate([0.3])
