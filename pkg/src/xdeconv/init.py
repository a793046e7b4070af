"""Minibatch k-means initialisation of mixture weights and means."""

from __future__ import annotations

import numpy as np

from .core import GmmParams, XDError


def _nearest(X, centers):
    d2 = (
        np.einsum("na,na->n", X, X)[:, None]
        - 2.0 * X @ centers.T
        + np.einsum("ka,ka->k", centers, centers)[None, :]
    )
    return np.argmin(d2, axis=1)


def kmeans_objective(X, centers):
    """Sum of squared distances from each row of ``X`` to its nearest center."""
    labels = _nearest(X, centers)
    diff = X - centers[labels]
    return float(np.einsum("na,na->", diff, diff))


def minibatch_kmeans(X, K, epochs=10, batch_size=500, seed=0):
    """Web-scale k-means with per-center ``1/count`` learning rates.

    Returns ``(centers, counts)``. Centers start at K distinct rows; a center
    that attracts no points during an epoch is moved to a random row.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if K > n:
        raise XDError(f"cannot place {K} centers with only {n} points")
    rng = np.random.default_rng(seed)
    unique = np.unique(X, axis=0)
    pool = unique if unique.shape[0] >= K else X
    centers = pool[rng.choice(pool.shape[0], size=K, replace=False)].copy()
    counts = np.zeros(K)
    M = min(batch_size, n)
    for _ in range(epochs):
        hits = np.zeros(K)
        perm = rng.permutation(n)
        for a in range(0, n, M):
            batch = X[perm[a : a + M]]
            labels = _nearest(batch, centers)
            for k in np.unique(labels):
                members = batch[labels == k]
                c = members.shape[0]
                # running mean: same as sequential updates with rate 1/count
                centers[k] += (members.sum(axis=0) - c * centers[k]) / (counts[k] + c)
                counts[k] += c
                hits[k] += c
        empty = np.flatnonzero(hits == 0)
        if empty.size:
            centers[empty] = X[rng.choice(n, size=empty.size, replace=False)]
            counts[empty] = 0
    return centers, counts


def kmeans_init(X, K, epochs=10, batch_size=500, seed=0):
    """Mixture with k-means centroids as means, identity covariances and
    weights proportional to each center's running count.

    A center left with no count (reseeded in the last epoch) is given the
    weight of a single point so every weight stays positive.
    """
    X = np.asarray(X, dtype=float)
    centers, counts = minibatch_kmeans(X, K, epochs, batch_size, seed)
    counts = np.maximum(counts, 1.0)
    alpha = counts / counts.sum()
    d = X.shape[1]
    covs = np.broadcast_to(np.eye(d), (K, d, d)).copy()
    return GmmParams(alpha, centers, covs).check()
