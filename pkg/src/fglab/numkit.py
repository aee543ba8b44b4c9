"""Dense vector/matrix primitives shared by the rest of the package.

Everything here works on float64 numpy arrays. Parameter vectors are plain
1-D arrays; an update matrix is an ``(n, d)`` array with one client per row.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np


class ZeroVectorError(ValueError):
    """Raised when a cosine is requested for a vector with zero norm."""


class RankDeficientWarning(UserWarning):
    pass


class SVDConvergenceError(RuntimeError):
    def __init__(self, n_iter: int, residual: float):
        super().__init__(
            f"subspace iteration did not converge after {n_iter} iterations "
            f"(last rotation {residual:.3e})"
        )
        self.n_iter = n_iter
        self.residual = residual


def _stream_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def rng_stream(seed: int, *stream_id) -> np.random.Generator:
    """Return an independent generator for ``(seed, *stream_id)``.

    Labels may be ints or strings (strings are hashed with crc32, which is
    stable across processes unlike ``hash``). The same key always yields the
    same sequence, no matter what other streams were drawn from before.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(s) for s in stream_id))
    return np.random.Generator(np.random.PCG64(ss))


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def cosine_similarity(u, v) -> float:
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def cosine_kernel(A, B) -> np.ndarray:
    """Cosine similarity between every row of ``A`` and every row of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroVectorError("cosine kernel got a zero row")
    K = (A / na[:, None]) @ (B / nb[:, None]).T
    return np.clip(K, -1.0, 1.0)


def pairwise_euclidean(rows) -> np.ndarray:
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one row")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # exact symmetry regardless of summation order
    D = np.triu(D, 1)
    return D + D.T


@dataclass
class TruncatedSVD:
    """Top-``m`` left singular vectors of a ``d x n`` matrix.

    ``padded`` counts trailing columns of ``vectors`` that are an orthonormal
    completion rather than true singular directions (the input had rank < m).
    """

    vectors: np.ndarray
    singular_values: np.ndarray
    n_iter: int
    padded: int = 0


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def _orthonormal_completion(Q: np.ndarray, k: int) -> np.ndarray:
    """Append ``k`` columns orthonormal to ``Q``, taken from coordinate axes."""
    d = Q.shape[0]
    cols = [Q[:, j] for j in range(Q.shape[1])]
    extra = []
    for i in range(d):
        if len(extra) == k:
            break
        e = np.zeros(d)
        e[i] = 1.0
        for _ in range(2):
            for c in cols + extra:
                e -= np.dot(c, e) * c
        n = np.linalg.norm(e)
        if n > 1e-8:
            extra.append(e / n)
    return np.column_stack(extra)


def truncated_svd(M, m: int, tol: float = 1e-10, max_iter: int = 1000,
                  oversample: int = 10, seed: int = 0) -> TruncatedSVD:
    """Top-``m`` left singular vectors of ``M`` by block subspace iteration.

    The block carries ``oversample`` extra columns and is re-orthonormalised
    every step; a Rayleigh-Ritz projection extracts the leading ``m``
    directions. Iteration stops when the leading subspace rotates by less than
    ``tol`` (sine of the largest principal angle) between steps.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("M must be a matrix")
    d, n = M.shape
    if m < 1 or m > min(d, n):
        raise ValueError(f"need 1 <= m <= min(d, n) = {min(d, n)}, got m={m}")
    if not np.all(np.isfinite(M)):
        raise ValueError("M has non-finite entries")

    b = min(n, m + oversample)
    G = rng_stream(seed, "truncated_svd").standard_normal((n, b))
    Q, _ = np.linalg.qr(M @ G)

    def ritz(Q):
        # small SVD of the projected matrix Q^T M (b x n)
        Ub, s, _ = np.linalg.svd(Q.T @ M, full_matrices=False)
        return Q @ Ub, s

    U, s = ritz(Q)
    n_iter = 0
    rotation = np.inf
    if b < n:
        for n_iter in range(1, max_iter + 1):
            Q, _ = np.linalg.qr(M @ (M.T @ Q))
            U_new, s = ritz(Q)
            k = max(1, min(m, int(np.sum(s > 1e-12 * s[0]))) if s[0] > 0 else 1)
            lead_old = U[:, :k]
            lead_new = U_new[:, :k]
            resid = lead_new - lead_old @ (lead_old.T @ lead_new)
            rotation = np.linalg.norm(resid, 2)
            U = U_new
            if rotation < tol:
                break
        else:
            raise SVDConvergenceError(max_iter, rotation)

    V = U[:, :m]
    s = s[:m]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    rank = int(np.sum(s > max(d, n) * np.finfo(float).eps * scale)) if s[0] > 0 else 0
    padded = m - rank
    if padded:
        V = np.column_stack([V[:, :rank], _orthonormal_completion(V[:, :rank], padded)]) \
            if rank else _orthonormal_completion(np.zeros((d, 0)), padded)
        s = np.concatenate([s[:rank], np.zeros(padded)])
        warnings.warn(f"rank {rank} < m={m}; padded {padded} directions",
                      RankDeficientWarning, stacklevel=2)
    # one more QR pass keeps V^T V = I to machine precision
    Vq, R = np.linalg.qr(V)
    sd = np.sign(np.diag(R))
    sd[sd == 0] = 1.0
    Vq = Vq * sd[None, :]
    return TruncatedSVD(_canonical_signs(Vq), s, n_iter, padded)
