import itertools
import math

import numpy as np
import pytest

from dtrec import hps
from dtrec import numerics as nx
from dtrec.backbone import BackboneConfig, SequentialRecommender

# round(3000 - 2990 * exp(-0.5)) evaluated once with a float64 scalar:
# 3000 - 2990 * 0.6065306597126334 = 1186.473...
K_AT_STEP_2 = 1186


def test_schedule_step_two_matches_scalar_oracle():
    sched = hps.GranularitySchedule(k0=10, k_upper=3000, alpha=0.5, steps=3)
    assert round(3000.0 - 2990.0 * math.exp(-0.5)) == K_AT_STEP_2
    assert hps.schedule_k(sched, 2) == K_AT_STEP_2


def test_schedule_first_step_and_cap():
    sched = hps.GranularitySchedule(k0=7, k_upper=500, alpha=2.0, steps=5)
    assert hps.schedule_k(sched, 1) == 7
    assert hps.schedule_k(sched, 5) == 500 - round(493 * math.exp(-8.0))
    assert hps.schedule_k(sched, 5, n_items=100) == 100


def test_schedule_grid_invariants():
    for k0, k_upper, alpha, n_items in itertools.product([1, 4, 10], [10, 64, 3000], [0.1, 0.5, 3.0], [50, 640]):
        sched = hps.GranularitySchedule(k0, k_upper, alpha, steps=5)
        ks = [hps.schedule_k(sched, t, n_items) for t in range(1, 6)]
        assert ks[0] == min(k0, n_items)
        assert all(a <= b for a, b in zip(ks, ks[1:]))
        assert max(ks) <= min(k_upper, n_items)


def test_constant_schedule_ablation():
    sched = hps.GranularitySchedule(k0=4, k_upper=64, steps=3, constant=True)
    assert [hps.schedule_k(sched, t) for t in (1, 2, 3)] == [4, 4, 4]


def test_schedule_contract_errors():
    sched = hps.GranularitySchedule(steps=3)
    with pytest.raises(ValueError):
        hps.schedule_k(sched, 0)
    with pytest.raises(ValueError):
        hps.schedule_k(sched, 4)
    with pytest.raises(ValueError):
        hps.GranularitySchedule(k0=20, k_upper=10)
    with pytest.raises(ValueError):
        hps.GranularitySchedule(alpha=0.0)


def brute_force_sse(X, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(X)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        best = min(best, sum(((X[labels == j] - X[labels == j].mean(0)) ** 2).sum() for j in range(k)))
    return best


def test_square_corners_split_into_pairs():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [2.0, 0.0], [2.0, 1.0]])
    res = hps.fit_kmeans(X, 2, seed=0)
    centers = sorted(map(tuple, res.centers))
    assert centers == [(0.0, 0.5), (2.0, 0.5)]
    assert res.sse == pytest.approx(brute_force_sse(X, 2), abs=1e-12)


@pytest.mark.parametrize("seed", range(30, 60))
def test_kmeans_matches_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(3, 9)), int(rng.integers(1, 4))
    k = min(int(rng.integers(1, 4)), n)
    X = rng.normal(size=(n, d))
    assert hps.fit_kmeans(X, k, seed=seed).sse == pytest.approx(brute_force_sse(X, k), rel=1e-12, abs=1e-12)


def test_k_equals_n_and_k_one():
    X = np.random.default_rng(1).normal(size=(6, 3))
    full = hps.fit_kmeans(X, 6)
    assert full.sse == 0.0
    np.testing.assert_array_equal(full.centers, X)
    np.testing.assert_allclose(hps.fit_prototypes(X, 1)[0], X.mean(0))
    with pytest.raises(ValueError):
        hps.fit_prototypes(X, 7)


def test_lloyd_sse_never_increases():
    X = np.random.default_rng(2).normal(size=(300, 8))
    rng = np.random.default_rng(0)
    res = hps.lloyd(X, hps.kmeans_plusplus(X, 12, rng))
    hist = np.array(res.history)
    assert (np.diff(hist) <= 1e-9).all()
    assert hps.hartigan(X, res).sse <= res.sse + 1e-9


def test_no_empty_clusters_with_duplicates():
    X = np.repeat(np.eye(3), [10, 1, 1], axis=0)
    res = hps.fit_kmeans(X, 3, seed=0)
    assert np.bincount(res.labels, minlength=3).min() > 0


def test_fit_is_seed_deterministic():
    X = np.random.default_rng(3).normal(size=(100, 4))
    np.testing.assert_array_equal(hps.fit_prototypes(X, 5, seed=9), hps.fit_prototypes(X, 5, seed=9))


def test_nearest_prototype_tie_and_linear_scan():
    centers = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
    assert hps.nearest_prototype_ids(np.array([[0.0, 0.0]]), centers)[0] == 0
    assert hps.nearest_prototype_ids(centers[2:3], centers)[0] == 2
    R = np.random.default_rng(4).normal(size=(200, 2))
    scan = np.array([min(range(3), key=lambda j: (((r - centers[j]) ** 2).sum(), j)) for r in R])
    np.testing.assert_array_equal(hps.nearest_prototype_ids(R, centers), scan)


def test_nearest_prototype_by_step():
    index = hps.PrototypeIndex([np.array([[0.0], [5.0]]), np.array([[0.0], [2.0], [5.0]])], [2, 3])
    np.testing.assert_array_equal(hps.nearest_prototype(np.array([[1.9]]), index, 1), [0.0])
    np.testing.assert_array_equal(hps.nearest_prototype(np.array([[1.9]]), index, 2), [2.0])
    with pytest.raises(ValueError):
        index.level(3)


def test_prototype_distribution_masks_padding():
    E = np.random.default_rng(5).normal(size=(6, 3))
    p = hps.prototype_distribution(E[2], E)
    assert p.shape == (1, 6)
    assert p[0, 0] == 0.0
    assert p.sum() == pytest.approx(1.0)
    logits = E[1:] @ E[2]
    np.testing.assert_allclose(p[0, 1:], np.exp(logits) / np.exp(logits).sum())


def test_warmup_weight():
    assert hps.warmup_weight(0, 0.3) == 0.0
    assert hps.warmup_weight(5, 0.3) == pytest.approx(0.15)
    assert hps.warmup_weight(10, 0.3) == 0.3
    assert hps.warmup_weight(25, 0.3) == 0.3
    weights = [hps.warmup_weight(e, 1.0) for e in range(15)]
    assert weights == sorted(weights)


def tiny_model(seed=0, n_items=20):
    cfg = BackboneConfig(n_items=n_items, d_model=8, n_layers=1, n_heads=2, max_len=6, dropout=0.0, init_std=0.3)
    return SequentialRecommender(cfg, seed=seed)


def test_prototype_loss_equals_entropy_when_targets_match_predictions():
    model = tiny_model()
    items = np.random.default_rng(0).integers(1, 21, size=(4, 5))
    trace = model.run_reasoning(items, 2)
    targets = {t: trace.probs(t).astype(np.float64) for t in (1, 2)}
    loss = hps.prototype_loss(trace, None, targets=targets)
    expected = sum(nx.entropy(nx.Tensor(trace.probs(t).astype(np.float64))).data.sum() for t in (1, 2)) / 4
    assert float(loss.data) == pytest.approx(expected, rel=1e-5)


def test_one_hot_soft_target_is_hard_ce():
    model = tiny_model()
    items = np.random.default_rng(1).integers(1, 21, size=(3, 5))
    trace = model.run_reasoning(items, 1)
    target = np.array([3, 7, 11])
    onehot = np.eye(21)[target]
    lp = hps.prototype_loss(trace, None, targets={1: onehot})
    ce = nx.cross_entropy(trace.log_probs[1], target, reduction="mean")
    assert float(lp.data) == pytest.approx(float(ce.data), rel=1e-6)


def test_prototype_loss_falls_along_its_gradient():
    model = tiny_model(seed=2)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    items = np.random.default_rng(2).integers(1, 21, size=(4, 5))
    sched = hps.GranularitySchedule(3, 8, 0.5, steps=2)
    index = hps.build_index(model.item_embeddings(), sched, seed=0)
    E = model.params["item_emb"].data
    trace = model.run_reasoning(items, 2)
    targets = hps.prototype_targets(trace, index, E)
    r = nx.Tensor(trace.states[1].data.copy(), requires_grad=True)
    dist = {1: targets[1]}

    def loss_at(state):
        lp = model.score(state)
        return nx.soft_cross_entropy(dist[1], lp, reduction="sum")

    base = loss_at(r)
    base.backward()
    stepped = nx.Tensor(r.data - 1e-3 * r.grad)
    assert float(loss_at(stepped).data) < float(base.data)


def test_no_gradient_reaches_embeddings_through_soft_targets():
    model = tiny_model(seed=3)
    items = np.random.default_rng(3).integers(1, 21, size=(4, 5))
    sched = hps.GranularitySchedule(3, 8, 0.5, steps=2)
    index = hps.build_index(model.item_embeddings(), sched, seed=0)
    trace = model.run_reasoning(items, 2)
    E = model.params["item_emb"]
    loss = hps.prototype_loss(trace, index, E.data)
    loss.backward()
    with_path = E.grad.copy()
    # the same loss with targets frozen up front must give the identical gradient
    for p in model.params.values():
        p.grad = None
    trace2 = model.run_reasoning(items, 2)
    frozen = {t: d.copy() for t, d in hps.prototype_targets(trace2, index, E.data).items()}
    hps.prototype_loss(trace2, index, targets=frozen).backward()
    np.testing.assert_array_equal(with_path, E.grad)
    assert not isinstance(hps.prototype_distribution(index.level(1)[0], E.data), nx.Tensor)


def test_index_refresh_levels_follow_schedule():
    model = tiny_model(n_items=40)
    sched = hps.GranularitySchedule(4, 30, 0.5, steps=3)
    index = hps.refresh_index(model, sched, epoch=2, seed=1, n_init=2)
    assert index.ks == [hps.schedule_k(sched, t, 40) for t in (1, 2, 3)]
    assert [c.shape[0] for c in index.centers] == index.ks
    assert index.epoch == 2
    assert all(np.isfinite(c).all() for c in index.centers)
