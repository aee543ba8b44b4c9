import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fglab import clustering
from fglab.numkit import ZeroVectorError, rng_stream


def madc_oracle(M):
    n = len(M)
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                P[i, j] = sum(abs(M[i][z] - M[j][z]) for z in range(n) if z not in (i, j)) / (n - 2)
    return P


def edc_oracle(W, m):
    U, _, _ = np.linalg.svd(W.T, full_matrices=False)
    V = U[:, :m]
    F = np.array([[w @ v / (np.linalg.norm(w) * np.linalg.norm(v)) for v in V.T] for w in W])
    n = len(W)
    return np.array([[np.sqrt(((F[i] - F[j]) ** 2).sum()) / m for j in range(n)] for i in range(n)])


def best_partition(points, m):
    """Brute force over all labelings: minimal within-cluster sum of squares."""
    best, arg = np.inf, None
    n = len(points)
    for labels in itertools.product(range(m), repeat=n):
        if len(set(labels)) < m:
            continue
        lab = np.array(labels)
        cost = sum(((points[lab == k] - points[lab == k].mean(axis=0)) ** 2).sum() for k in range(m))
        if cost < best - 1e-12:
            best, arg = cost, lab
    return arg


def same_partition(a, b):
    groups = lambda lab: {frozenset(np.flatnonzero(lab == k)) for k in np.unique(lab)}
    return groups(np.asarray(a)) == groups(np.asarray(b))


def test_similarity_matrix_hand():
    M = clustering.similarity_matrix([[1, 0], [0, 1], [1, 1]])
    r = 1 / np.sqrt(2)
    assert np.allclose(M, [[1, 0, r], [0, 1, r], [r, r, 1]], atol=1e-4)
    D = clustering.similarity_matrix([[1, 2], [2, 4], [0, 1]])
    assert D[0, 1] == pytest.approx(1.0)
    with pytest.raises(ZeroVectorError):
        clustering.similarity_matrix([[1, 0], [0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(2, 12))
def test_similarity_matrix_symmetric_unit_diag(seed, n, d):
    W = np.random.default_rng(seed).normal(size=(n, d))
    M = clustering.similarity_matrix(W)
    assert np.array_equal(M, M.T) and np.all(np.diag(M) == 1.0)
    assert np.all(np.abs(M) <= 1)


def test_madc_hand_and_errors():
    M = clustering.similarity_matrix([[1, 0], [0, 1], [1, 1]])
    P = clustering.madc_matrix(M)
    assert P[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert np.all(np.diag(P) == 0)
    with pytest.raises(ValueError):
        clustering.madc_matrix(np.eye(2))


def test_madc_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        M = clustering.similarity_matrix(rng.normal(size=(6, 20)))
        assert np.abs(clustering.madc_matrix(M) - madc_oracle(M)).max() <= 1e-12


def test_edc_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        W = rng.normal(size=(8, 50))
        _, E = clustering.edc(W, 3)
        assert np.abs(E - edc_oracle(W, 3)).max() <= 1e-10


def test_edc_collinear_rows_zero():
    v = np.random.default_rng(2).normal(size=10)
    W = np.array([a * v for a in (0.5, 1.0, 3.0, 7.0)])
    F, E = clustering.edc(W, 1)
    assert np.abs(E).max() <= 1e-12
    assert np.all(np.abs(F) <= 1)


def test_edc_bounds_check():
    with pytest.raises(ValueError):
        clustering.edc(np.ones((3, 5)) + np.eye(3, 5), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_edc_madc_scale_invariance_and_triangle(seed, a):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, 15))
    W2 = W.copy()
    W2[2] *= a
    # EDC sees one row's scale through the SVD; only a common scale cancels
    _, E = clustering.edc(W, 2)
    _, E2 = clustering.edc(a * W, 2)
    assert np.abs(E - E2).max() <= 1e-12
    P = clustering.madc_matrix(clustering.similarity_matrix(W))
    P2 = clustering.madc_matrix(clustering.similarity_matrix(W2))
    assert np.abs(P - P2).max() <= 1e-12
    for i, j, k in itertools.permutations(range(6), 3):
        assert E[i, k] <= E[i, j] + E[j, k] + 1e-12


def test_kmeans_examples():
    pts = np.array([[0.0], [0.1], [10.0], [10.1]])
    lab = clustering.kmeans_pp(pts, 2, rng_stream(0, "kmeans")).labels
    assert same_partition(lab, best_partition(pts, 2))
    assert same_partition(lab, [0, 0, 1, 1])
    single = clustering.kmeans_pp(pts, 4, rng_stream(0, "kmeans"))
    assert len(np.unique(single.labels)) == 4
    same = clustering.kmeans_pp(np.ones((5, 2)), 2, rng_stream(0, "kmeans"))
    assert set(same.labels.tolist()) <= {0, 1}
    with pytest.raises(ValueError):
        clustering.kmeans_pp(pts, 5, rng_stream(0))


def test_kmeans_matches_brute_force_small():
    rng = np.random.default_rng(4)
    for _ in range(10):
        centers = rng.normal(scale=20, size=(3, 2))
        pts = np.vstack([c + rng.normal(scale=0.5, size=(2, 2)) for c in centers])
        lab = clustering.kmeans_pp(pts, 3, rng_stream(1, "kmeans")).labels
        assert same_partition(lab, best_partition(pts, 3))


def test_kmeans_recovers_separated_blobs():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        centers = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
        truth = np.repeat(np.arange(4), 15)
        pts = centers[truth] + rng.uniform(-0.5, 0.5, size=(60, 2))
        lab = clustering.kmeans_pp(pts, 4, rng_stream(seed, "kmeans")).labels
        assert same_partition(lab, truth)


def test_kmeans_deterministic():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    a = clustering.kmeans_pp(pts, 4, rng_stream(9, "kmeans")).labels
    b = clustering.kmeans_pp(pts, 4, rng_stream(9, "kmeans")).labels
    assert np.array_equal(a, b)


def test_hierarchical_examples():
    pts = np.array([0.0, 0.1, 10.0, 10.1])
    D = np.abs(pts[:, None] - pts[None, :])
    assert same_partition(clustering.hierarchical_complete(D, 2).labels, [0, 0, 1, 1])
    assert len(np.unique(clustering.hierarchical_complete(D, 4).labels)) == 4
    assert np.all(clustering.hierarchical_complete(D, 1).labels == 0)
    with pytest.raises(ValueError):
        clustering.hierarchical_complete(np.array([[0, 1], [2, 0.0]]), 1)


def test_hierarchical_tie_break_lowest_pair():
    D = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)
    assert clustering.hierarchical_complete(D, 2).labels.tolist() == [0, 0, 1]


def complete_linkage_oracle(D, m):
    clusters = [[i] for i in range(len(D))]
    while len(clusters) > m:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = max(D[i, j] for i in clusters[a] for j in clusters[b])
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    lab = np.zeros(len(D), dtype=int)
    for k, c in enumerate(clusters):
        lab[c] = k
    return lab


def test_hierarchical_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        X = rng.normal(size=(9, 3))
        D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
        for m in (2, 3, 5):
            assert same_partition(clustering.hierarchical_complete(D, m).labels,
                                  complete_linkage_oracle(D, m))
