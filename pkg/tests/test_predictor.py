from __future__ import annotations

import numpy as np
import pytest

from ufo import predictor as pr
from ufo.arch_space import Architecture, Gate, LayerChoice, SearchSpace, sample_distinct, validate
from ufo.objectives import average_ranks, kendall_tau

SPACE = SearchSpace(heads=(4, 5, 6), mlp_ratios=(2, 3, 4), num_layers=2, num_tasks=3, embed_dim=48, head_dim=8, tokens=17, patch_dim=16)
B, P, S = Gate.BOTH, Gate.PRIVATE, Gate.SHARED


def arch(*layers):
    return Architecture(tuple(LayerChoice(h, m, g, d) for h, m, g, d in layers))


def linear_landscape(seed, n=250, task=0):
    rng = np.random.default_rng(seed)
    archs = sample_distinct(SPACE, n, rng)
    phi = pr.feature_matrix(archs, task, SPACE)
    return archs, phi @ rng.normal(size=phi.shape[1]), rng


def test_feature_length_closed_form():
    assert pr.feature_length(SPACE) == 2 * (3 + 3 + 3 + 1) + 2 == 22
    a = SPACE.max_arch(B)
    assert pr.featurize(a, 0, SPACE).shape == (22,)


def test_one_hot_blocks():
    rng = np.random.default_rng(0)
    for a in sample_distinct(SPACE, 50, rng):
        f = pr.featurize(a, 1, SPACE)
        for i, layer in enumerate(a.layers):
            blk = f[i * 10:(i + 1) * 10]
            assert blk[0:3].sum() == blk[3:6].sum() == blk[6:9].sum() == 1.0
            assert blk[0:3].argmax() == SPACE.heads.index(layer.heads)
            assert blk[3:6].argmax() == SPACE.mlp_ratios.index(layer.mlp_ratio)
            assert pr.GATE_ORDER[blk[6:9].argmax()] is layer.gates[1]
            assert blk[9] == layer.keep


def test_other_task_gates_do_not_change_features():
    a = arch((4, 2, (S, P, B), 1), (6, 3, (B, B, S), 1))
    b = arch((4, 2, (S, B, S), 1), (6, 3, (B, P, P), 1))
    np.testing.assert_array_equal(pr.featurize(a, 0, SPACE), pr.featurize(b, 0, SPACE))
    assert not np.array_equal(pr.featurize(a, 1, SPACE), pr.featurize(b, 1, SPACE))


def test_max_arch_cost_features_are_one():
    f = pr.featurize(SPACE.max_arch(B), 2, SPACE)
    assert f[-2:].tolist() == [1.0, 1.0]
    g = pr.featurize(arch((4, 2, (S, S, S), 1), (4, 2, (S, S, S), 0)), 2, SPACE)
    assert 0.0 < g[-2] < 1.0 and 0.0 < g[-1] < 1.0


def test_constant_targets_predict_constant():
    archs, _, _ = linear_landscape(1, n=30)
    p = pr.fit(archs, [42.5] * 30, 0, SPACE)
    np.testing.assert_allclose(pr.predict_many(p, sample_distinct(SPACE, 20, np.random.default_rng(9)), SPACE), 42.5, atol=1e-6)


def test_noiseless_fit_interpolates_training_points():
    archs, y, _ = linear_landscape(2, n=120)
    p = pr.fit(archs, y, 0, SPACE, sigma2=1e-10)
    np.testing.assert_allclose(pr.predict_many(p, archs, SPACE), y, atol=1e-6)


def test_noiseless_holdout_rank_is_exact():
    archs, y, _ = linear_landscape(3)
    p = pr.fit(archs[:200], y[:200], 0, SPACE, sigma2=1e-10)
    assert kendall_tau(pr.predict_many(p, archs[200:], SPACE), y[200:]) == pytest.approx(1.0, abs=1e-9)


def test_posterior_mean_matches_closed_form():
    archs, y, rng = linear_landscape(4, n=60)
    y = y + rng.normal(scale=0.5, size=len(y))
    phi = pr.feature_matrix(archs, 0, SPACE)
    p = pr.fit(archs, y, 0, SPACE, alpha2=2.0, sigma2=0.3)
    c = phi - phi.mean(0)
    w = np.linalg.solve(c.T @ c + (0.3 / 2.0) * np.eye(c.shape[1]), c.T @ (y - y.mean()))
    np.testing.assert_allclose(p.weights, w, rtol=1e-8, atol=1e-10)
    assert np.allclose(p.covariance, p.covariance.T)
    assert np.linalg.eigvalsh(p.covariance).min() > -1e-12
    assert (p.predict_std(phi) > 0).all()


def test_rank_deficient_design_falls_back_to_pinv():
    archs = [SPACE.max_arch(B), arch((4, 2, (S, S, S), 1), (4, 2, (S, S, S), 1))] * 3
    p = pr.fit(archs, [1.0, 0.0] * 3, 0, SPACE, sigma2=0.0)
    assert p.pinv_fallback
    assert pr.predict(p, SPACE.max_arch(B), SPACE) == pytest.approx(1.0, abs=1e-6)


def test_fit_needs_two_distinct_archs():
    a = SPACE.max_arch(B)
    with pytest.raises(ValueError):
        pr.fit([a, a], [1.0, 2.0], 0, SPACE)


def test_duplicated_rows_do_not_change_predictions():
    archs, y, _ = linear_landscape(5, n=40)
    probe = sample_distinct(SPACE, 15, np.random.default_rng(77))
    base = pr.predict_many(pr.fit(archs, y, 0, SPACE, sigma2=1e-10), probe, SPACE)
    dup = pr.predict_many(pr.fit(archs + archs[:10], np.concatenate([y, y[:10]]), 0, SPACE, sigma2=1e-10), probe, SPACE)
    np.testing.assert_allclose(base, dup, atol=1e-6)


def test_rank_vector_examples():
    np.testing.assert_array_equal(average_ranks([0.9, 0.5, 0.7]), [1, 3, 2])
    np.testing.assert_array_equal(average_ranks([0.5, 0.5]), [1.5, 1.5])


def test_predict_ranks_is_permutation_with_average_ties():
    archs, y, _ = linear_landscape(6, n=80)
    p = pr.fit(archs, y, 0, SPACE)
    ranks = pr.predict_ranks(p, archs, SPACE)
    assert ranks.sum() == pytest.approx(len(archs) * (len(archs) + 1) / 2)
    assert ranks.min() >= 1 and ranks.max() <= len(archs)


def test_readiness_extremes():
    good = pr.readiness_from_scores([1, 2, 3, 4], [10, 20, 30, 40], 1.0)
    assert good == pr.Readiness(1.0, True)
    bad = pr.readiness_from_scores([4, 3, 2, 1], [10, 20, 30, 40], 0.7)
    assert bad.kd == -1.0 and not bad.ready
    undefined = pr.readiness_from_scores([1, 1, 1], [1, 2, 3], -1.0)
    assert np.isnan(undefined.kd) and not undefined.ready


def test_readiness_rejects_overlapping_holdout():
    archs, y, _ = linear_landscape(7, n=30)
    p = pr.fit(archs[:20], y[:20], 0, SPACE)
    with pytest.raises(ValueError):
        pr.readiness(p, archs[15:25], y[15:25], 0.7, SPACE)
    r = pr.readiness(p, archs[20:], y[20:], 0.7, SPACE)
    assert -1.0 <= r.kd <= 1.0


def test_disjoint_train_test_protocol_at_desk_scale():
    # 100 training and 100 disjoint test sub-networks on a noisy synthetic task
    taus = []
    for seed in range(5):
        archs, y, rng = linear_landscape(10 + seed, n=200)
        noisy = y + rng.normal(scale=0.05 * np.ptp(y), size=len(y))
        p = pr.fit(archs[:100], noisy[:100], 0, SPACE)
        taus.append(pr.readiness(p, archs[100:], noisy[100:], 0.6, SPACE).kd)
    assert np.median(taus) >= 0.6


def test_holdout_hash_split_is_deterministic_and_sized():
    encs = [a.encode() for a in sample_distinct(SPACE, 2000, np.random.default_rng(0))]
    train, hold = pr.split_holdout(encs, 0.2)
    assert pr.split_holdout(encs, 0.2) == (train, hold)
    assert sorted(train + hold) == list(range(2000))
    assert 0.16 < len(hold) / 2000 < 0.24
    assert all(pr.is_holdout(encs[i]) for i in hold)


def test_checkpoint_roundtrip(tmp_path):
    archs, y, _ = linear_landscape(8, n=40)
    p = pr.fit(archs, y, 2, SPACE, alpha2=3.0, sigma2=0.02)
    p.save(tmp_path / "p.ufob")
    q = pr.RankPredictor.load(tmp_path / "p.ufob")
    assert (q.task, q.alpha2, q.sigma2, q.feature_hash, q.n_train) == (2, 3.0, 0.02, p.feature_hash, 40)
    probe = sample_distinct(SPACE, 10, np.random.default_rng(1))
    np.testing.assert_array_equal(pr.predict_many(p, probe, SPACE), pr.predict_many(q, probe, SPACE))


def test_space_mismatch_rejected():
    archs, y, _ = linear_landscape(9, n=30)
    p = pr.fit(archs, y, 0, SPACE)
    other = SearchSpace(heads=(4, 6), mlp_ratios=(2, 3, 4), num_layers=2, num_tasks=3, embed_dim=48, head_dim=8, tokens=17, patch_dim=16)
    a = other.max_arch(B)
    assert not validate(a, other)
    with pytest.raises(ValueError):
        pr.predict_many(p, [a], other)
