import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featstress.featstore import LabelSet
from featstress.metrics import (
    accuracy,
    average_precision,
    compression_figure,
    compression_rate,
    mean_average_precision,
    stressed_bits,
)
from oracles import ap_eleven_point, ap_precision_at_positives


def test_worked_example():
    ap = average_precision([0.9, 0.8, 0.7], [True, False, True])
    assert ap == pytest.approx((1 + 2 / 3) / 2, abs=1e-9)


@pytest.mark.parametrize("variant", ["all_points", "eleven_point"])
def test_all_positive_and_perfect_ranking(variant):
    assert average_precision([0.1, 0.5, 0.2], [True, True, True], variant) == 1.0
    assert average_precision([3, 2, 1, 0], [True, True, False, False], variant) == 1.0


def test_no_positives_is_an_error():
    with pytest.raises(ValueError, match="positive"):
        average_precision([0.3, 0.2], [False, False])


def test_ties_follow_row_order():
    # equal scores: earlier row ranks first
    assert average_precision([1.0, 1.0], [True, False]) == 1.0
    assert average_precision([1.0, 1.0], [False, True]) == 0.5


instances = st.integers(1, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, -2.0]) | st.floats(-5, 5), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(any),
    )
)


@settings(max_examples=300, deadline=None)
@given(instances)
def test_all_points_matches_oracle_exactly(inst):
    scores, positives = inst
    assert average_precision(scores, positives) == ap_precision_at_positives(scores, positives)


@settings(max_examples=300, deadline=None)
@given(instances)
def test_eleven_point_matches_oracle(inst):
    scores, positives = inst
    ap = average_precision(scores, positives, "eleven_point")
    assert 0 <= ap <= 1
    assert ap == pytest.approx(ap_eleven_point(scores, positives), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(instances, st.sampled_from(["all_points", "eleven_point"]))
def test_rank_invariance(inst, variant):
    scores, positives = inst
    s = np.asarray(scores)
    dense_rank = lambda v: np.searchsorted(np.unique(v), v).astype(float)
    for f in (lambda v: 2 * v, dense_rank, lambda v: np.exp(dense_rank(v))):
        assert average_precision(f(s), positives, variant) == average_precision(s, positives, variant)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_ap_bounds(inst):
    ap = average_precision(*inst)
    assert 0 < ap <= 1


def _multi(Y):
    return LabelSet("multi_label", Y.shape[1], tuple(tuple(np.flatnonzero(r).tolist()) for r in Y))


def test_map_is_mean_of_per_class():
    g = np.random.default_rng(1)
    Y = g.random((30, 4)) < 0.4
    Y[0] = True
    D = g.normal(size=(30, 4))
    rep = mean_average_precision(D, _multi(Y))
    assert rep.overall == math.fsum(rep.per_class) / 4
    assert rep.per_class == [average_precision(D[:, k], Y[:, k]) for k in range(4)]
    assert rep.metric_kind == "map" and rep.n_test == 30


def test_single_class_map():
    Y = np.array([[True], [False], [True]])
    D = np.array([[0.1], [0.9], [0.5]])
    assert mean_average_precision(D, _multi(Y)).overall == average_precision(D[:, 0], Y[:, 0])


def test_map_excludes_classes_without_positives():
    Y = np.array([[True, False], [False, False]])
    rep = mean_average_precision(np.zeros((2, 2)), _multi(Y))
    assert rep.excluded_classes == [1] and math.isnan(rep.per_class[1])
    assert rep.overall == rep.per_class[0]
    with pytest.raises(ValueError):
        mean_average_precision(np.zeros((2, 2)), _multi(Y), strict=True)


def test_random_decisions_map_is_positive_rate():
    g = np.random.default_rng(2)
    Y = g.random((10_000, 3)) < 0.5
    rep = mean_average_precision(g.normal(size=(10_000, 3)), _multi(Y))
    assert abs(rep.overall - Y.mean()) <= 0.02


def test_map_rank_invariance():
    g = np.random.default_rng(3)
    Y = g.random((50, 3)) < 0.3
    Y[0] = True
    D = g.normal(size=(50, 3))
    assert mean_average_precision(np.exp(D), _multi(Y)).overall == mean_average_precision(D, _multi(Y)).overall


def test_accuracy_counts():
    labels = LabelSet.from_ids([0, 1, 2, 1])
    assert accuracy([0, 1, 2, 1], labels).overall == 1.0
    assert accuracy([1, 0, 0, 0], labels).overall == 0.0
    rep = accuracy([0, 1, 2, 0], labels)
    assert rep.overall == 0.75 and rep.per_class == [1.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        accuracy([0], LabelSet("multi_label", 2, ((0,),)))


def test_compression_examples():
    assert compression_rate(4096, 1024, 4) == 0.984375
    fig = compression_figure(4096, 1024, 4, 0.5, 0.5)
    assert (fig.original_bits, fig.stressed_bits, fig.rate, fig.retention) == (131072, 2048, 0.984375, 1.0)
    assert compression_rate(4096, 4096, None) == 0.0
    assert stressed_bits(10, 1) == 0
    assert [stressed_bits(1, h) for h in (2, 3, 4, 5, 7, 8, 9, 30)] == [1, 2, 2, 3, 3, 3, 4, 5]


def test_bits_match_ceil_log2():
    for h in range(2, 1000):
        assert stressed_bits(1, h) == math.ceil(math.log2(h))


def test_compression_figure_validation():
    with pytest.raises(ValueError):
        compression_figure(10, 11, 2, 1, 1)
    with pytest.raises(ValueError):
        compression_figure(10, 5, 2, 1, 0)
    with pytest.raises(ValueError):
        stressed_bits(3, 0)
