import itertools

import numpy as np
import pytest

from entrometa.cluster import (
    DBSCAN,
    DbscanParams,
    KMeans,
    TaskConstructionError,
    construct_pseudo_tasks,
)


def brute_force_dbscan(X, eps, min_samples):
    """O(n^3) density-reachability oracle: returns (core_mask, noise_mask, core_partition).

    core_partition maps each core index to a frozenset of the core points
    density-connected with it (border membership is scan-order dependent
    and deliberately not part of the oracle).
    """
    n = len(X)
    d = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
    within = d <= eps
    core = within.sum(axis=1) >= min_samples
    # transitive closure of "directly density reachable" restricted to cores
    reach = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            reach[i, j] = core[i] and core[j] and within[i, j]
    for k in range(n):
        for i in range(n):
            if reach[i, k]:
                for j in range(n):
                    if reach[k, j]:
                        reach[i, j] = True
    noise = np.ones(n, dtype=bool)
    for i in range(n):
        if core[i]:
            noise[i] = False
        elif any(core[j] and within[i, j] for j in range(n)):
            noise[i] = False  # border point
    partition = {}
    for i in range(n):
        if core[i]:
            partition[i] = frozenset(j for j in range(n) if core[j] and (reach[i, j] or i == j))
    return core, noise, partition


def two_blob_points(rng, n_per=20, gap=10.0):
    a = rng.normal(scale=0.3, size=(n_per, 2))
    b = rng.normal(scale=0.3, size=(n_per, 2)) + np.array([gap, 0.0])
    return np.vstack([a, b])


def test_dbscan_two_blobs():
    rng = np.random.default_rng(0)
    X = two_blob_points(rng)
    model = DBSCAN(eps=2.0, min_samples=5).fit(X)
    assert model.n_clusters_ == 2
    assert not np.any(model.labels_ == -1)
    # blobs are index-contiguous: labels constant within each half
    assert len(set(model.labels_[:20])) == 1 and len(set(model.labels_[20:])) == 1
    assert model.labels_[0] != model.labels_[20]


def test_dbscan_all_noise():
    X = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    model = DBSCAN(eps=1.0, min_samples=2).fit(X)
    assert model.n_clusters_ == 0
    assert np.all(model.labels_ == -1)
    assert not model.core_mask_.any()


def test_dbscan_single_point_min_samples_one():
    model = DBSCAN(eps=0.5, min_samples=1).fit(np.array([[1.0, 2.0]]))
    assert model.n_clusters_ == 1
    assert model.labels_.tolist() == [0]
    assert model.core_mask_.tolist() == [True]


def test_dbscan_empty_input():
    model = DBSCAN(eps=1.0, min_samples=2).fit(np.empty((0, 3)))
    assert model.n_clusters_ == 0 and model.labels_.size == 0


def test_dbscan_oracle_equivalence_100_instances():
    rng = np.random.default_rng(42)
    for trial in range(100):
        n = int(rng.integers(2, 65))
        dim = int(rng.integers(1, 4))
        X = rng.normal(scale=rng.uniform(0.5, 2.0), size=(n, dim))
        eps = float(rng.uniform(0.3, 1.5))
        min_samples = int(rng.integers(1, 6))
        model = DBSCAN(eps=eps, min_samples=min_samples).fit(X)
        core, noise, partition = brute_force_dbscan(X, eps, min_samples)
        assert np.array_equal(model.core_mask_, core), f"core mismatch on trial {trial}"
        assert np.array_equal(model.labels_ == -1, noise), f"noise mismatch on trial {trial}"
        # density-connected cores share a label; disconnected ones do not
        for i in partition:
            same = {j for j in partition if model.labels_[j] == model.labels_[i]}
            assert same == set(partition[i]), f"core partition mismatch on trial {trial}"


def test_dbscan_core_noise_invariant_under_permutation():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    base = DBSCAN(eps=0.6, min_samples=3).fit(X)
    perm = rng.permutation(40)
    shuffled = DBSCAN(eps=0.6, min_samples=3).fit(X[perm])
    assert np.array_equal(shuffled.core_mask_, base.core_mask_[perm])
    assert np.array_equal(shuffled.labels_ == -1, (base.labels_ == -1)[perm])


def test_dbscan_invalid_params():
    with pytest.raises(ValueError):
        DBSCAN(eps=-1.0, min_samples=2).fit(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DBSCAN(eps=1.0, min_samples=0).fit(np.zeros((2, 2)))


def test_kmeans_k_equals_n_points():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 2))
    model = KMeans(n_clusters=6, seed=0).fit(X)
    assert sorted(model.labels_.tolist()) == list(range(6))
    assert model.inertia_ == pytest.approx(0.0, abs=1e-20)


def test_kmeans_matches_brute_force_optimal_two_partition():
    rng = np.random.default_rng(5)
    X = two_blob_points(rng, n_per=8, gap=8.0)  # 16 points
    model = KMeans(n_clusters=2, seed=0).fit(X)

    def inertia(groups):
        total = 0.0
        for g in groups:
            if len(g):
                pts = X[list(g)]
                total += ((pts - pts.mean(axis=0)) ** 2).sum()
        return total

    best, best_val = None, np.inf
    for mask in range(1, 2 ** 15):  # fix point 0 in group A to halve the space
        a = [0] + [i for i in range(1, 16) if mask & (1 << (i - 1))]
        b = [i for i in range(1, 16) if not mask & (1 << (i - 1))]
        if not b:
            continue
        val = inertia([a, b])
        if val < best_val:
            best, best_val = (frozenset(a), frozenset(b)), val
    got = (
        frozenset(np.flatnonzero(model.labels_ == 0).tolist()),
        frozenset(np.flatnonzero(model.labels_ == 1).tolist()),
    )
    assert set(got) == set(best)
    assert model.inertia_ == pytest.approx(best_val, rel=1e-9)


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 3))
    a = KMeans(n_clusters=4, seed=11).fit(X)
    b = KMeans(n_clusters=4, seed=11).fit(X)
    assert np.array_equal(a.labels_, b.labels_)
    assert np.array_equal(a.cluster_centers_, b.cluster_centers_)


def test_kmeans_inertia_non_increasing_over_iterations():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 2))
    inertias = [KMeans(n_clusters=3, max_iters=i, seed=0).fit(X).inertia_ for i in range(1, 12)]
    assert all(b <= a + 1e-9 for a, b in zip(inertias, inertias[1:]))


def test_kmeans_k_exceeds_points():
    with pytest.raises(ValueError):
        KMeans(n_clusters=5).fit(np.zeros((3, 2)))


def test_estimator_params_protocol():
    model = DBSCAN(eps=2.5, min_samples=7)
    assert model.get_params() == {"eps": 2.5, "min_samples": 7}
    model.set_params(eps=1.25)
    assert model.eps == 1.25
    with pytest.raises(ValueError):
        model.set_params(bogus=1)


def gaussian_pool(rng, C=5, per_class=200, dim=4, spread=8.0):
    centers = rng.normal(size=(C, dim))
    centers *= spread / np.linalg.norm(centers[1] - centers[0])
    X = np.vstack([centers[c] + rng.normal(scale=0.5, size=(per_class, dim)) for c in range(C)])
    y = np.repeat(np.arange(C), per_class)
    return X, y


def best_match_agreement(pred, true):
    """Max agreement over label permutations (small way counts only)."""
    ways = np.unique(pred)
    best = 0.0
    for perm in itertools.permutations(np.unique(true), len(ways)):
        mapping = dict(zip(ways, perm))
        best = max(best, np.mean([mapping[p] == t for p, t in zip(pred, true)]))
    return best


def test_construct_pseudo_tasks_agrees_with_generator():
    rng = np.random.default_rng(17)
    X, y = gaussian_pool(rng)
    tasks = construct_pseudo_tasks(
        X,
        embed=None,
        num_tasks=8,
        samples_per_task=50,
        params=DbscanParams(eps=2.0, min_samples=4),
        seed=17,
        true_labels=y,
    )
    assert len(tasks) == 8
    for task in tasks:
        assert 2 <= task.way <= 5
        pseudo = np.concatenate([task.support_y, task.query_y])
        true = np.concatenate([task.support_true, task.query_true])
        assert best_match_agreement(pseudo, true) >= 0.9
        # every class in support, no noise rows, every class >= min_samples members
        assert set(np.unique(task.support_y)) == set(range(task.way))
        for c in range(task.way):
            assert (pseudo == c).sum() >= 4


def test_construct_pseudo_tasks_rejects_single_cluster():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 3))
    with pytest.raises(TaskConstructionError, match="eps"):
        construct_pseudo_tasks(
            X,
            embed=None,
            num_tasks=1,
            samples_per_task=40,
            params=DbscanParams(eps=1e9, min_samples=3),
            seed=0,
            max_retries=10,
        )


def test_construct_pseudo_tasks_deterministic():
    rng = np.random.default_rng(23)
    X, y = gaussian_pool(rng, C=4, per_class=100)
    kwargs = dict(
        embed=None,
        num_tasks=4,
        samples_per_task=40,
        params=DbscanParams(eps=2.0, min_samples=4),
        seed=5,
        true_labels=y,
    )
    a = construct_pseudo_tasks(X, **kwargs)
    b = construct_pseudo_tasks(X, **kwargs)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.support_x, tb.support_x)
        assert np.array_equal(ta.support_y, tb.support_y)
        assert np.array_equal(ta.query_x, tb.query_x)
        assert np.array_equal(ta.query_y, tb.query_y)
