from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ufo import autograd as ag
from ufo.objectives import (
    LossConfig,
    UndefinedCorrelation,
    average_precision,
    average_ranks,
    cosface_loss,
    cross_entropy,
    kendall_tau,
    retrieval_metrics,
    triplet_batch_hard,
    TripletPrecondition,
)


def brute_tau(a, b):
    """O(n^2) tau-b from explicit pair classification."""
    c = d = ta = tb = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        da, db = np.sign(a[i] - a[j]), np.sign(b[i] - b[j])
        if da == 0 and db == 0:
            continue
        if da == 0:
            ta += 1
        elif db == 0:
            tb += 1
        elif da == db:
            c += 1
        else:
            d += 1
    return (c - d) / math.sqrt((c + d + ta) * (c + d + tb))


def np_cosface(x, w, y, s, m):
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    cos = xn @ wn.T
    cos[np.arange(len(y)), y] -= m
    z = s * cos
    z = z - z.max(1, keepdims=True)
    return float(-np.mean(z[np.arange(len(y)), y] - np.log(np.exp(z).sum(1))))


def np_triplet(x, y, m):
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    out = []
    for a in range(len(x)):
        d = np.linalg.norm(x - x[a], axis=1)
        pos = max(d[p] for p in range(len(x)) if y[p] == y[a])
        neg = min(d[n] for n in range(len(x)) if y[n] != y[a])
        out.append(max(0.0, pos - neg + m))
    return float(np.mean(out))


# cosface


def test_cosface_hand_value():
    x = ag.Tensor(np.array([[1.0, 0.0]]))
    w = ag.Tensor(np.eye(2))
    loss = cosface_loss(x, w, [0], scale=2.0, margin=0.5).data
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)
    assert float(loss) == pytest.approx(0.3133, abs=1e-4)


def test_cosface_without_margin_is_scaled_cosine_cross_entropy():
    rng = np.random.default_rng(0)
    x, w, y = rng.normal(size=(6, 4)), rng.normal(size=(5, 4)), rng.integers(0, 5, 6)
    with ag.precision(np.float64):
        got = float(cosface_loss(ag.Tensor(x), ag.Tensor(w), y, 8.0, 0.0).data)
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        wn = w / np.linalg.norm(w, axis=1, keepdims=True)
        ref = float(cross_entropy(ag.Tensor(8.0 * xn @ wn.T), y).data)
    assert got == pytest.approx(ref, abs=1e-6)


def test_cosface_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, w, y = rng.normal(size=(7, 5)), rng.normal(size=(4, 5)), rng.integers(0, 4, 7)
        with ag.precision(np.float64):
            got = float(cosface_loss(ag.Tensor(x), ag.Tensor(w), y, 16.0, 0.2).data)
        assert got == pytest.approx(np_cosface(x, w, y, 16.0, 0.2), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 0.45), st.floats(0, 0.45))
def test_cosface_monotone_in_margin(seed, m1, m2):
    rng = np.random.default_rng(seed)
    x, w, y = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.integers(0, 4, 5)
    lo, hi = sorted((m1, m2))
    with ag.precision(np.float64):
        a = float(cosface_loss(ag.Tensor(x), ag.Tensor(w), y, 16.0, lo).data)
        b = float(cosface_loss(ag.Tensor(x), ag.Tensor(w), y, 16.0, hi).data)
    assert b >= a - 1e-12


def test_cosface_gradient_wrt_features():
    rng = np.random.default_rng(2)
    with ag.precision(np.float64):
        x = ag.parameter(rng.normal(size=(6, 4)))
        w = ag.parameter(rng.normal(size=(3, 4)))
        y = rng.integers(0, 3, 6)
        err = ag.grad_check(lambda: cosface_loss(x, w, y, 16.0, 0.2), [x, w], eps=1e-4)
    assert err < 1e-3


def test_cosface_rejects_zero_norm_row():
    with pytest.raises(ValueError):
        cosface_loss(ag.Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])), ag.Tensor(np.eye(2)), [0, 1], 16.0, 0.2)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(margin=1.0)
    with pytest.raises(ValueError):
        LossConfig(recipes=("softmax",))
    assert LossConfig(recipes=("ce",)).recipe(0) == "ce"
    assert LossConfig().recipe(3) == "cosface+triplet"


# triplet


def test_triplet_identical_embeddings_give_margin():
    x = ag.Tensor(np.ones((4, 3)))
    assert float(triplet_batch_hard(x, [0, 0, 1, 1], 0.3).data) == pytest.approx(0.3, abs=1e-5)


def test_triplet_separated_clusters_give_zero():
    x = ag.Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]))
    assert float(triplet_batch_hard(x, [0, 0, 1, 1], 0.3).data) == 0.0


def test_triplet_four_point_hand_instance():
    x = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.8, 0.6]])
    y = np.array([0, 0, 1, 1])
    with ag.precision(np.float64):
        got = float(triplet_batch_hard(ag.Tensor(x), y, 0.3).data)
    assert got == pytest.approx(np_triplet(x, y, 0.3), abs=1e-9)


def test_triplet_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        y = rng.integers(0, 4, 10)
        if len(set(y)) < 2:
            continue
        x = rng.normal(size=(10, 5))
        with ag.precision(np.float64):
            got = float(triplet_batch_hard(ag.Tensor(x), y, 0.3).data)
        assert got == pytest.approx(np_triplet(x, y, 0.3), abs=1e-9)


def test_triplet_gradient():
    rng = np.random.default_rng(4)
    with ag.precision(np.float64):
        x = ag.parameter(rng.normal(size=(8, 4)))
        y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        err = ag.grad_check(lambda: triplet_batch_hard(x, y, 0.3), x, eps=1e-4)
    assert err < 1e-3


@pytest.mark.parametrize("labels", [[0, 0, 0], [0, 1, 2]])
def test_triplet_precondition(labels):
    with pytest.raises(TripletPrecondition):
        triplet_batch_hard(ag.Tensor(np.eye(3)), labels, 0.3)


# retrieval


def test_average_precision_hand_value():
    assert average_precision(np.array([0, 1, 1])) == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert average_precision(np.array([0, 0])) == 0.0


def test_perfect_and_reversed_retrieval():
    q = np.eye(4)
    g = np.eye(4) + 0.01
    ids = np.arange(4)
    assert retrieval_metrics(q, g, ids, ids) == {"rank1": 1.0, "mAP": 1.0}
    bad = retrieval_metrics(q, -g + 2 * g.mean(0), ids, ids)
    assert bad["rank1"] == 0.0


def test_retrieval_single_query_ap():
    q = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.05], [0.9, 0.3], [0.5, 0.8]])
    m = retrieval_metrics(q, g, [7], [3, 7, 7])
    assert m["rank1"] == 0.0
    assert m["mAP"] == pytest.approx(0.5833, abs=1e-4)


def test_retrieval_rejects_orphan_queries():
    with pytest.raises(ValueError):
        retrieval_metrics(np.eye(2), np.eye(2), [0, 5], [0, 1])


# kendall tau


def test_kendall_examples():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)


def test_kendall_constant_input_is_undefined():
    with pytest.raises(UndefinedCorrelation):
        kendall_tau([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelation):
        kendall_tau([1, 2, 3], [5, 5, 5])


def test_kendall_matches_brute_force_with_ties():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        a, b = rng.integers(0, 6, n).astype(float), rng.integers(0, 6, n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert kendall_tau(a, b) == brute_tau(a, b)


def test_kendall_matches_scipy():
    from scipy.stats import kendalltau

    rng = np.random.default_rng(6)
    for _ in range(50):
        a, b = rng.normal(size=80).round(1), rng.normal(size=80).round(1)
        assert kendall_tau(a, b) == pytest.approx(kendalltau(a, b).statistic, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=40))
def test_kendall_symmetry_and_range(pairs):
    a = np.array([p[0] for p in pairs], float)
    b = np.array([p[1] for p in pairs], float)
    if len(set(a)) < 2 or len(set(b)) < 2:
        return
    t = kendall_tau(a, b)
    assert -1.0 <= t <= 1.0
    assert t == pytest.approx(kendall_tau(b, a), abs=1e-12)
    assert kendall_tau(a, -b) == pytest.approx(-t, abs=1e-12)


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks([0.9, 0.5, 0.9, 0.1]), [1.5, 3.0, 1.5, 4.0])
    np.testing.assert_array_equal(average_ranks([3, 1, 2], higher_is_better=False), [3.0, 1.0, 2.0])
