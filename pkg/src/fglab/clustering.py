"""Similarity measures over client updates and the two clustering back-ends.

``similarity_matrix`` / ``madc_matrix`` give the pairwise cosine view of an
update matrix; ``edc`` embeds every update by its cosine to the top singular
directions of the stack. ``kmeans_pp`` clusters EDC embeddings and
``hierarchical_complete`` clusters a precomputed proximity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import ZeroVectorError, cosine_kernel, pairwise_euclidean, truncated_svd


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray | None = None
    n_iter: int = 0

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.labels == g)


def _update_matrix(updates) -> np.ndarray:
    W = np.atleast_2d(np.asarray(updates, dtype=np.float64))
    if W.shape[0] < 1:
        raise ValueError("empty update matrix")
    if np.any(np.linalg.norm(W, axis=1) == 0.0):
        raise ZeroVectorError("update matrix has a zero row")
    return W


def similarity_matrix(updates) -> np.ndarray:
    W = _update_matrix(updates)
    M = cosine_kernel(W, W)
    M = (M + M.T) / 2.0
    np.fill_diagonal(M, 1.0)
    return M


def madc_matrix(M) -> np.ndarray:
    """Mean absolute difference of cosine profiles over the other ``n - 2`` clients."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if n < 3:
        raise ValueError("MADC needs at least 3 clients")
    # |S(i,z) - S(j,z)| summed over all z, minus the z = i and z = j terms
    absdiff = np.abs(M[:, None, :] - M[None, :, :]).sum(axis=2)
    d = np.diag(M)
    self_terms = np.abs(d[:, None] - M.T) + np.abs(M - d[None, :])
    P = (absdiff - self_terms) / (n - 2)
    P = (P + P.T) / 2.0
    np.fill_diagonal(P, 0.0)
    return P


def edc_features(updates, m: int):
    """Cosine between each update and the top-``m`` left singular vectors of the
    transposed update matrix. Returns ``(features (n x m), svd result)``."""
    W = _update_matrix(updates)
    n, d = W.shape
    if not 1 <= m <= min(n, d):
        raise ValueError(f"need 1 <= m <= min(n, d) = {min(n, d)}")
    svd = truncated_svd(W.T, m)
    return cosine_kernel(W, svd.vectors.T), svd


def edc(updates, m: int) -> tuple[np.ndarray, np.ndarray]:
    """EDC embedding and its pairwise distance matrix (scaled by ``1/m``)."""
    F, _ = edc_features(updates, m)
    return F, pairwise_euclidean(F) / m


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp(points, m: int, rng: np.random.Generator, max_iter: int = 300,
              tol: float = 1e-9) -> ClusterAssignment:
    """K-Means++ seeding followed by Lloyd iterations.

    An empty cluster is re-seeded at the point farthest from its assigned
    center. Ties in assignment go to the lowest cluster index.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = X.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n = {n}, got m={m}")

    centers = np.empty((m, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centers[:1]).min(axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[k] = X[idx]
        d2 = np.minimum(d2, _sq_dists(X, centers[k:k + 1])[:, 0])

    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, centers)
        labels = np.argmin(D, axis=1)
        new = centers.copy()
        for k in range(m):
            mask = labels == k
            if mask.any():
                new[k] = X[mask].mean(axis=0)
        empty = [k for k in range(m) if not np.any(labels == k)]
        if empty:
            own = D[np.arange(n), labels]
            taken = set()
            for k in empty:
                order = np.argsort(-own, kind="stable")
                far = next((int(i) for i in order if int(i) not in taken), None)
                if far is None or own[far] == 0.0:
                    break
                taken.add(far)
                new[k] = X[far]
                labels[far] = k
                own[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    return ClusterAssignment(labels, centers, it)


def hierarchical_complete(proximity, m: int) -> ClusterAssignment:
    """Agglomerative clustering with complete linkage down to ``m`` clusters.

    At each step the pair of clusters with the smallest linkage distance is
    merged; ties go to the lexicographically smallest ``(i, j)`` pair of
    cluster slots (a merged cluster keeps the lower slot).
    """
    D = np.array(proximity, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("proximity must be square")
    if not np.allclose(D, D.T, atol=1e-12, rtol=0):
        raise ValueError("proximity matrix is not symmetric")
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n = {n}")
    active = list(range(n))
    owner = np.arange(n)
    inf = np.inf
    np.fill_diagonal(D, inf)
    while len(active) > m:
        sub = D[np.ix_(active, active)]
        flat = int(np.argmin(sub))          # row-major: lowest (i, j) on ties
        a, b = divmod(flat, len(active))
        i, j = sorted((active[a], active[b]))
        merged = np.maximum(D[i], D[j])
        D[i, :] = merged
        D[:, i] = merged
        D[i, i] = inf
        D[j, :] = inf
        D[:, j] = inf
        owner[owner == j] = i
        active.remove(j)
    slot = {s: k for k, s in enumerate(sorted(active))}
    return ClusterAssignment(np.array([slot[o] for o in owner], dtype=np.int64))
