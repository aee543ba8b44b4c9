import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fglab import models
from fglab.models import MCLR, MLP, Batch, ModelParams, ModelSpec

from conftest import finite_diff


def rand_problem(rng, kind, d=5, c=4, h=6, n=7):
    spec = ModelSpec(kind, d, c, h if kind == MLP else 0)
    w = rng.normal(scale=0.5, size=spec.num_params)
    batch = Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))
    return spec, w, batch


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_parameter_counts_match_table():
    assert models.parameter_count(MCLR, 784, 10) == 7850
    assert models.parameter_count(MLP, 784, 10, 128) == 101770
    assert models.parameter_count(MCLR, 60, 10) == 610


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("CNN", 3, 2)
    with pytest.raises(ValueError):
        ModelSpec(MLP, 3, 2)
    with pytest.raises(ValueError):
        ModelSpec(MCLR, 3, 2, 5)
    with pytest.raises(ValueError):
        ModelParams(ModelSpec(MCLR, 3, 2), np.zeros(5))


def test_flatten_roundtrip_exact():
    rng = np.random.default_rng(0)
    spec = ModelSpec(MLP, 7, 3, 5)
    w = rng.normal(size=spec.num_params)
    assert np.array_equal(models.flatten(models.unflatten(spec, w)), w)
    assert [b.shape for b in models.unflatten(spec, w)] == spec.shapes


def test_zero_mclr_loss_is_log_c():
    spec = ModelSpec(MCLR, 4, 10)
    b = Batch(np.random.default_rng(1).normal(size=(6, 4)), np.arange(6))
    assert models.loss(spec, np.zeros(spec.num_params), b) == pytest.approx(np.log(10), abs=1e-12)


def test_confident_correct_logits_below_uniform():
    spec = ModelSpec(MCLR, 1, 10)
    w = np.zeros(spec.num_params)
    w[3] = 5.0                         # W[0, 3]: class 3 grows with the feature
    b = Batch(np.array([[1.0]]), np.array([3]))
    assert models.loss(spec, w, b) < np.log(10)


def test_loss_hand_evaluation():
    # 2 examples, 2 features, 3 classes
    spec = ModelSpec(MCLR, 2, 3)
    W = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.0]])
    bias = np.array([0.0, 0.1, 0.2])
    X = np.array([[1.0, 2.0], [0.0, -1.0]])
    y = np.array([0, 2])
    z0 = [1.0 + 1.0 + 0.0, 0.0 + 1.0 + 0.1, -1.0 + 0.0 + 0.2]
    z1 = [0.0 - 0.5 + 0.0, 0.0 - 0.5 + 0.1, 0.0 + 0.0 + 0.2]
    l0 = -z0[0] + np.log(sum(np.exp(z) for z in z0))
    l1 = -z1[2] + np.log(sum(np.exp(z) for z in z1))
    got = models.loss(spec, models.flatten([W, bias]), Batch(X, y))
    assert got == pytest.approx((l0 + l1) / 2, abs=1e-14)


@pytest.mark.parametrize("kind", [MCLR, MLP])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(20):
        spec, w, b = rand_problem(rng, kind)
        g = models.gradient(spec, w, b)
        fd = finite_diff(lambda v: models.loss(spec, v, b), w)
        assert rel_err(g, fd) <= 1e-5


def test_gradient_vanishes_at_minimum():
    spec = ModelSpec(MCLR, 2, 2)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.2], [0.2, 1.0]])
    y = np.array([0, 1, 1, 0])          # not separable: finite minimiser
    b = Batch(X, y)
    w = np.zeros(spec.num_params)
    for _ in range(20000):
        w -= 2.0 * models.gradient(spec, w, b)
    assert np.linalg.norm(models.gradient(spec, w, b)) < 1e-6


def test_prox_gradient():
    rng = np.random.default_rng(4)
    spec, w, b = rand_problem(rng, MCLR)
    g = models.gradient(spec, w, b)
    anchor = rng.normal(size=w.size)
    assert np.array_equal(models.prox_gradient(spec, w, b, anchor, 0.0), g)
    assert np.array_equal(models.prox_gradient(spec, w, b, w.copy(), 3.0), g)
    shifted = w.copy()
    shifted[0] -= 1.0                   # w - anchor = e_0
    expect = g.copy()
    expect[0] += 2.0
    assert np.allclose(models.prox_gradient(spec, w, b, shifted, 2.0), expect, atol=1e-15)
    with pytest.raises(ValueError):
        models.prox_gradient(spec, w, b, anchor, -1.0)


def test_dimension_mismatch():
    spec = ModelSpec(MCLR, 3, 2)
    with pytest.raises(ValueError):
        models.loss(spec, np.zeros(spec.num_params), Batch(np.zeros((2, 4)), [0, 1]))


def test_accuracy_examples():
    spec = ModelSpec(MCLR, 10, 10)
    X = np.eye(10)
    y = np.arange(10)
    W = np.eye(10) * 5
    w = models.flatten([W, np.zeros(10)])
    assert models.accuracy(spec, w, Batch(X, y)) == 1.0
    # zero model predicts class 0 everywhere
    yb = np.repeat(np.arange(10), 3)
    Xb = np.random.default_rng(0).normal(size=(30, 10))
    assert models.accuracy(spec, np.zeros(spec.num_params), Batch(Xb, yb)) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        models.accuracy(spec, w, Batch(np.zeros((0, 10)), np.zeros(0, dtype=int)))


def test_accuracy_permuted_labels_brute_force():
    rng = np.random.default_rng(8)
    spec, w, b = rand_problem(rng, MCLR, n=40)
    pred = models.predict(spec, w, b.features)
    perm = np.array([1, 2, 3, 0])
    relabeled = Batch(b.features, perm[pred])
    hits = sum(int(p == t) for p, t in zip(pred, relabeled.labels))
    assert models.accuracy(spec, w, relabeled) == hits / 40 == 0.0


def test_predict_tie_goes_to_lowest_class():
    spec = ModelSpec(MCLR, 2, 3)
    w = models.flatten([np.zeros((2, 3)), np.array([1.0, 2.0, 2.0])])
    assert models.predict(spec, w, np.zeros((1, 2)))[0] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_mclr_convexity(seed, t):
    rng = np.random.default_rng(seed)
    spec, w, b = rand_problem(rng, MCLR)
    v = rng.normal(scale=2.0, size=w.size)
    lhs = models.loss(spec, t * w + (1 - t) * v, b)
    rhs = t * models.loss(spec, w, b) + (1 - t) * models.loss(spec, v, b)
    assert lhs <= rhs + 1e-10


def test_init_params():
    spec = ModelSpec(MLP, 8, 3, 4)
    from fglab.numkit import rng_stream
    a = models.init_params(spec, rng_stream(0, "init"))
    b = models.init_params(spec, rng_stream(0, "init"))
    assert np.array_equal(a, b)
    W1, b1, W2, b2 = models.unflatten(spec, a)
    assert np.abs(W1).max() <= np.sqrt(6 / 12) and not b1.any() and not b2.any()
    assert not models.init_params(ModelSpec(MCLR, 8, 3)).any()
    with pytest.raises(ValueError):
        models.init_params(spec)
