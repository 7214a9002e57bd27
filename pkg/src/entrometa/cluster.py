"""Density-based and centroid clustering, plus unsupervised episode construction.

DBSCAN drives heterogeneous pseudo-task construction: each candidate task
is a random subsample of the unlabeled pool, embedded and clustered; the
surviving clusters become that task's classes, so the classification way
varies from task to task.  KMeans is the fixed-way baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._base import BaseEstimator, check_matrix
from .tasks import Task

__all__ = [
    "DbscanParams",
    "DBSCAN",
    "KMeans",
    "TaskConstructionError",
    "construct_pseudo_tasks",
]


@dataclass(frozen=True)
class DbscanParams:
    """Scan radius and density threshold; also the small-cluster drop size."""

    eps: float = 1.0
    min_samples: int = 15

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")


class TaskConstructionError(RuntimeError):
    """No clusterable task found within the retry budget."""


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


class DBSCAN(BaseEstimator):
    """Euclidean DBSCAN with deterministic scan order.

    Core points have at least ``min_samples`` neighbours (self included)
    within ``eps``.  Clusters are maximal density-connected sets of core
    points plus the border points they reach; border points contested by
    several clusters go to the first cluster discovered in index order.
    Unclaimed points are labeled -1 (noise).
    """

    def __init__(self, eps: float = 1.0, min_samples: int = 15):
        self.eps = eps
        self.min_samples = min_samples

    def fit(self, X, y=None):
        DbscanParams(self.eps, self.min_samples)  # validate
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        if n == 0:
            self.labels_ = np.empty(0, dtype=np.int64)
            self.core_mask_ = np.empty(0, dtype=bool)
            self.n_clusters_ = 0
            return self
        check_matrix(X, "X")
        d2 = _pairwise_sq_dists(X)
        adj = d2 <= self.eps**2
        core = adj.sum(axis=1) >= self.min_samples
        labels = np.full(n, -1, dtype=np.int64)
        cid = 0
        for i in range(n):
            if labels[i] != -1 or not core[i]:
                continue
            labels[i] = cid
            frontier = [i]
            while frontier:
                q = frontier.pop(0)
                for j in np.flatnonzero(adj[q]):
                    if labels[j] == -1:
                        labels[j] = cid
                        if core[j]:
                            frontier.append(j)
            cid += 1
        self.labels_ = labels
        self.core_mask_ = core
        self.n_clusters_ = cid
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_


class KMeans(BaseEstimator):
    """Lloyd's algorithm with seeded k-means++ initialization.

    Deterministic per seed; an emptied cluster is reseeded to the point
    farthest from its current centroid.  No noise labels.
    """

    def __init__(self, n_clusters: int = 2, max_iters: int = 100, seed: int = 0):
        self.n_clusters = n_clusters
        self.max_iters = max_iters
        self.seed = seed

    def _init_centroids(self, X: np.ndarray, rng) -> np.ndarray:
        n = X.shape[0]
        centroids = [X[rng.integers(n)]]
        for _ in range(1, self.n_clusters):
            d2 = np.min(
                [((X - c) ** 2).sum(axis=1) for c in centroids], axis=0
            )
            total = d2.sum()
            if total <= 0:  # coincident points: fall back to uniform choice
                idx = rng.integers(n)
            else:
                idx = rng.choice(n, p=d2 / total)
            centroids.append(X[idx])
        return np.array(centroids)

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        k = self.n_clusters
        if k < 1:
            raise ValueError(f"n_clusters must be >= 1, got {k}")
        if k > X.shape[0]:
            raise ValueError(f"n_clusters={k} exceeds {X.shape[0]} points")
        rng = np.random.default_rng(self.seed)
        centroids = self._init_centroids(X, rng)
        labels = None
        for _it in range(self.max_iters):
            d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                members = new_labels == c
                if members.any():
                    centroids[c] = X[members].mean(axis=0)
                else:
                    centroids[c] = X[d2[np.arange(len(X)), new_labels].argmax()]
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        self.labels_ = d2.argmin(axis=1).astype(np.int64)
        self.cluster_centers_ = centroids
        self.inertia_ = float(d2[np.arange(len(X)), self.labels_].sum())
        self.core_mask_ = np.ones(X.shape[0], dtype=bool)
        self.n_clusters_ = k
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_

    def predict(self, X) -> np.ndarray:
        X = check_matrix(X, "X")
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1).astype(np.int64)


def construct_pseudo_tasks(
    pool: np.ndarray,
    embed: Callable[[np.ndarray], np.ndarray] | None,
    num_tasks: int,
    samples_per_task: int = 50,
    support_fraction: float = 0.5,
    params: DbscanParams = DbscanParams(),
    seed: int = 0,
    true_labels: np.ndarray | None = None,
    max_retries: int = 100,
    max_way: int | None = None,
) -> list[Task]:
    """Build heterogeneous episodes by clustering embedded subsamples.

    Per task: sample ``samples_per_task`` pool points without replacement,
    embed them, run DBSCAN, drop noise and clusters smaller than
    ``min_samples``, relabel survivors 0..c-1, and split every cluster
    between support and query by ``support_fraction``.  Tasks that end up
    with fewer than two clusters (or more than ``max_way``, when the
    consumer's classifier head has a width limit) are resampled, up to
    ``max_retries`` attempts each.
    """
    pool = check_matrix(pool, "pool")
    if samples_per_task > pool.shape[0]:
        raise ValueError(
            f"samples_per_task={samples_per_task} exceeds pool size {pool.shape[0]}"
        )
    if not (0.0 < support_fraction < 1.0):
        raise ValueError(f"support_fraction must be in (0,1), got {support_fraction}")
    if embed is None:
        embed = lambda Z: Z
    rng = np.random.default_rng(seed)
    scanner = DBSCAN(eps=params.eps, min_samples=params.min_samples)
    tasks = []
    for _ in range(num_tasks):
        task = None
        for _attempt in range(max_retries):
            idx = rng.choice(pool.shape[0], size=samples_per_task, replace=False)
            emb = np.asarray(embed(pool[idx]), dtype=np.float64)
            raw = scanner.fit_predict(emb)
            keep_ids = [
                c for c in range(raw.max() + 1) if (raw == c).sum() >= params.min_samples
            ]
            if len(keep_ids) < 2 or (max_way is not None and len(keep_ids) > max_way):
                continue
            sup_rows, sup_y, qry_rows, qry_y = [], [], [], []
            for new_c, c in enumerate(keep_ids):
                members = np.flatnonzero(raw == c)
                members = members[rng.permutation(members.size)]
                n_sup = int(round(support_fraction * members.size))
                n_sup = max(1, min(members.size - 1, n_sup)) if members.size > 1 else 1
                sup_rows.extend(members[:n_sup])
                qry_rows.extend(members[n_sup:])
                sup_y.extend([new_c] * n_sup)
                qry_y.extend([new_c] * (members.size - n_sup))
            if not qry_rows:
                continue
            sup_rows = np.array(sup_rows)
            qry_rows = np.array(qry_rows)
            task = Task(
                support_x=pool[idx][sup_rows],
                support_y=np.array(sup_y, dtype=np.int64),
                query_x=pool[idx][qry_rows],
                query_y=np.array(qry_y, dtype=np.int64),
                way=len(keep_ids),
                support_true=None if true_labels is None else true_labels[idx][sup_rows],
                query_true=None if true_labels is None else true_labels[idx][qry_rows],
            )
            break
        if task is None:
            raise TaskConstructionError(
                f"no task with >= 2 clusters after {max_retries} resamples; "
                f"adjust eps ({params.eps}) or min_samples ({params.min_samples})"
            )
        tasks.append(task)
    return tasks
