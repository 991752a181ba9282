"""Deterministic Laplacian-eigenmaps embedding of feature vectors.

Dense generalized eigensolve on the k-NN graph Laplacian; no randomized
initialization, so identical inputs give identical coordinates.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from sklearn.metrics import silhouette_score

from .errors import DataError


def pairwise_sq_distances(x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Squared Euclidean distances, computed in float64 row blocks."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    sq = (x**2).sum(axis=1)
    out = np.empty((n, n), dtype=np.float64)
    for s in range(0, n, chunk):
        block = x[s : s + chunk]
        out[s : s + chunk] = sq[s : s + chunk, None] + sq[None, :] - 2.0 * block @ x.T
    np.maximum(out, 0.0, out=out)
    return out


def knn_adjacency(x: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized boolean k-nearest-neighbor graph (ties broken by index)."""
    n = len(x)
    if n < 2:
        raise DataError("need at least 2 samples for a neighbor graph")
    k = min(k, n - 1)
    d2 = pairwise_sq_distances(x)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    adj[rows, order.ravel()] = True
    return adj | adj.T


def laplacian_eigenmaps(x: np.ndarray, dim: int = 2, k: int = 10) -> np.ndarray:
    """Embed rows of x into `dim` dimensions.

    Solves the generalized problem L y = lambda D y for the unnormalized
    graph Laplacian and returns the eigenvectors after the constant one.
    """
    adj = knn_adjacency(x, k).astype(np.float64)
    deg = adj.sum(axis=1)
    lap = np.diag(deg) - adj
    dmat = np.diag(np.maximum(deg, 1e-12))
    vals, vecs = scipy.linalg.eigh(lap, dmat)
    order = np.argsort(vals, kind="stable")
    return vecs[:, order[1 : dim + 1]]


def separation_score(embedded: np.ndarray, labels: np.ndarray) -> float:
    """Silhouette of a binary labeling in the embedded space, in [-1, 1]."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("separation score needs two populated label groups")
    # Coincident embeddings make the silhouette 0/0; call that no separation.
    if np.allclose(embedded, embedded[0]):
        return 0.0
    return float(silhouette_score(embedded, labels, metric="euclidean"))
