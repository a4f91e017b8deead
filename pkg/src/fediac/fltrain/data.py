"""Synthetic classification data and Dirichlet label-skew partitioning."""

from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_classification

from .._validation import check_random_state


@dataclass
class ClientData:
    """One client's shard; ``indices`` point into the full training set."""

    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    label_counts: np.ndarray

    def __len__(self):
        return int(self.indices.size)


@dataclass
class Task:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self):
        return int(max(self.y_train.max(), self.y_test.max()) + 1)

    @property
    def n_features(self):
        return self.X_train.shape[1]


def make_task(n_classes=10, n_features=32, n_train=6000, n_test=2000, class_sep=1.5,
              random_state=0):
    """Gaussian-cluster classification task with a held-out test split.

    Each class is one Gaussian blob on the vertices of a hypercube in the
    informative subspace (``sklearn.datasets.make_classification``).
    """
    X, y = make_classification(
        n_samples=n_train + n_test,
        n_features=n_features,
        n_informative=min(n_features, 16),
        n_redundant=0,
        n_classes=n_classes,
        n_clusters_per_class=1,
        class_sep=class_sep,
        flip_y=0.0,
        random_state=random_state,
    )
    X = X.astype(np.float64)
    return Task(X[:n_train], y[:n_train], X[n_train:], y[n_train:])


def dirichlet_partition(y, n_clients, beta, rng, min_size=1, max_tries=1000):
    """Split sample indices across clients with Dirichlet(beta) label proportions.

    For every label a proportion vector over the clients is drawn from a
    symmetric Dirichlet and that label's samples are cut accordingly.
    Partitions leaving some client with fewer than ``min_size`` samples are
    redrawn.

    Returns
    -------
    list of ndarray
        Disjoint index arrays covering ``range(len(y))``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    rng = check_random_state(rng)
    y = np.asarray(y)
    if y.size < n_clients * min_size:
        raise ValueError("not enough samples for the requested clients")
    by_label = [np.flatnonzero(y == c) for c in np.unique(y)]
    for _ in range(max_tries):
        shards = [[] for _ in range(n_clients)]
        for idx in by_label:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_clients, beta))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for cid, part in enumerate(np.split(idx, cuts)):
                shards[cid].append(part)
        shards = [np.sort(np.concatenate(parts)) for parts in shards]
        if min(s.size for s in shards) >= min_size:
            return shards
    raise RuntimeError(f"no partition with >= {min_size} samples per client "
                       f"after {max_tries} draws")


def client_shards(X, y, partition, n_classes):
    return [
        ClientData(idx, X[idx], y[idx], np.bincount(y[idx], minlength=n_classes))
        for idx in partition
    ]


def label_entropy(counts):
    """Shannon entropy (nats) of a label histogram."""
    p = np.asarray(counts, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())
