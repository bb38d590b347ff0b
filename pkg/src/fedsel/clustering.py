"""Client clustering on compressed gradients and per-cluster cohesion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import feature_matrix
from .seeding import as_rng


@dataclass(eq=False)
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    sizes: np.ndarray
    n_iter: int = 0
    objective_history: tuple = ()

    @property
    def n_clusters(self) -> int:
        return self.sizes.shape[0]

    def members(self, h: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == h)

    def strata(self) -> list[np.ndarray]:
        return [self.members(h) for h in range(self.n_clusters)]

    @classmethod
    def from_assignments(cls, assignments, feats=None, n_clusters: int | None = None) -> "Clustering":
        assignments = np.asarray(assignments, dtype=np.int64)
        n_clusters = int(assignments.max()) + 1 if n_clusters is None else n_clusters
        sizes = np.bincount(assignments, minlength=n_clusters)
        if feats is None:
            centroids = np.zeros((n_clusters, 0))
        else:
            x = feature_matrix(feats) if not isinstance(feats, np.ndarray) else np.atleast_2d(feats)
            centroids = _means(x, assignments, n_clusters)
        return cls(assignments, centroids, sizes)


def _means(x: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    sums = np.zeros((n_clusters, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=n_clusters)
    return sums / np.maximum(counts, 1)[:, None]


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _repair(x, labels, centroids, n_clusters):
    # fill each empty cluster with the farthest member of the current largest cluster
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=n_clusters)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels, centroids
        target = int(empty[0])
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        dist = ((x[members] - centroids[donor]) ** 2).sum(axis=1)
        moved = int(members[np.argmax(dist)])
        labels[moved] = target
        centroids = centroids.copy()
        centroids[target] = x[moved]


def cluster_clients(feats, n_clusters: int, seed=0, max_iters: int = 100) -> Clustering:
    """Lloyd's k-means over clients' compressed gradients.

    Initial centers are ``n_clusters`` distinct clients drawn at random.
    Iterates until the assignment stops changing or ``max_iters`` passes.
    """
    x = feats if isinstance(feats, np.ndarray) else feature_matrix(feats)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= n_clusters <= {n} clients, got {n_clusters}")
    rng = as_rng(seed)
    centroids = x[np.sort(rng.choice(n, n_clusters, replace=False))].copy()
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_labels = np.argmin(_sq_dists(x, centroids), axis=1)
        new_labels, centroids = _repair(x, new_labels, centroids, n_clusters)
        centroids = _means(x, new_labels, n_clusters)
        history.append(float(((x - centroids[new_labels]) ** 2).sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    labels = new_labels
    return Clustering(labels, centroids, np.bincount(labels, minlength=n_clusters), n_iter, tuple(history))


def cohesion(members) -> float:
    """Mean squared distance over ordered pairs of distinct members.

    Equals ``sum_{i != j} ||X_i - X_j||^2 / (N_h (N_h - 1))``, i.e. twice the
    unbiased within-cluster variance; 0 for a singleton.
    """
    x = members if isinstance(members, np.ndarray) else feature_matrix(members)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        return 0.0
    centered = x - x.mean(axis=0)
    return float(2.0 * (centered ** 2).sum() / (n - 1))


def cluster_cohesions(feats, clustering: Clustering) -> np.ndarray:
    x = feats if isinstance(feats, np.ndarray) else feature_matrix(feats)
    return np.array([cohesion(x[clustering.members(h)]) for h in range(clustering.n_clusters)])


def kmeans_objective(x: np.ndarray, clustering: Clustering) -> float:
    return float(((x - clustering.centroids[clustering.assignments]) ** 2).sum())
