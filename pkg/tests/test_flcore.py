import numpy as np
import pytest

from fglab import flcore, models
from fglab.datagen import ClientShard, FederatedDataset
from fglab.models import Batch, ModelSpec
from fglab.numkit import rng_stream


def shard(cid, X, y, test=None):
    test = test or (X[:1], y[:1])
    return ClientShard(cid, Batch(X, y), Batch(*test))


def test_train_params_validation():
    with pytest.raises(ValueError):
        flcore.TrainParams(E=0)
    with pytest.raises(ValueError):
        flcore.TrainParams(eta=0)
    with pytest.raises(ValueError):
        flcore.TrainParams(mu=-1)


def test_single_full_batch_step(small_digits, mclr_digits):
    s = small_digits[0]
    w = np.random.default_rng(0).normal(scale=0.1, size=mclr_digits.num_params)
    dw = flcore.client_update(mclr_digits, s, w, 1, s.n_train, 0.05, 0.0, rng_stream(0))
    expect = -0.05 * models.gradient(mclr_digits, w, s.train)
    assert np.allclose(dw, expect, atol=1e-15)


def test_client_update_deterministic(small_digits, mclr_digits):
    w = np.zeros(mclr_digits.num_params)
    a = flcore.client_update(mclr_digits, small_digits[1], w, 3, 4, 0.03, 0.1, rng_stream(5, "c"))
    b = flcore.client_update(mclr_digits, small_digits[1], w, 3, 4, 0.03, 0.1, rng_stream(5, "c"))
    assert np.array_equal(a, b)


def test_client_update_errors(mclr_digits):
    empty = ClientShard(0, Batch(np.zeros((0, 64)), np.zeros(0, dtype=int)),
                        Batch(np.zeros((1, 64)), [0]))
    with pytest.raises(ValueError):
        flcore.client_update(mclr_digits, empty, np.zeros(650), 1, 1, 0.1, 0, rng_stream(0))


def test_proximal_term_shrinks_update(small_digits, mclr_digits):
    s = small_digits[2]
    w = np.zeros(mclr_digits.num_params)
    norms = [np.linalg.norm(flcore.client_update(mclr_digits, s, w, 5, s.n_train, 0.1, mu,
                                                 rng_stream(0)))
             for mu in (0.0, 0.5, 2.0, 8.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_proximal_quadratic_closed_form():
    # F(w) = ||w - c||^2 / 2 in one coordinate, reached through an MCLR bias:
    # check that full-batch prox SGD matches the closed-form linear recursion
    # d_{k+1} = d_k - eta * (g(d_k) + mu * d_k) on a toy where the gradient is
    # evaluated exactly by the model code.
    spec = ModelSpec(models.MCLR, 1, 2)
    X = np.zeros((2, 1))
    y = np.array([0, 1])
    s = shard(0, X, y)
    w0 = np.array([0.0, 0.0, 1.0, -1.0])
    for mu in (0.0, 1.0):
        dw = flcore.client_update(spec, s, w0, 3, 2, 0.5, mu, rng_stream(0))
        cur = w0.copy()
        for _ in range(3):
            cur = cur - 0.5 * models.prox_gradient(spec, cur, s.train, w0, mu)
        assert np.allclose(dw, cur - w0, atol=1e-15)


def test_select_clients():
    rng = rng_stream(0, "select", 1)
    assert flcore.select_clients(1, 5, 5, rng).tolist() == [0, 1, 2, 3, 4]
    a = flcore.select_clients(1, 3, 20, rng_stream(0, "select", 1))
    b = flcore.select_clients(2, 3, 20, rng_stream(0, "select", 2))
    assert len(set(a)) == 3 and len(set(b)) == 3
    assert np.array_equal(a, flcore.select_clients(1, 3, 20, rng_stream(0, "select", 1)))
    with pytest.raises(ValueError):
        flcore.select_clients(1, 6, 5, rng)


def test_select_clients_uniform():
    counts = np.zeros(10)
    for t in range(10_000):
        counts[flcore.select_clients(t, 2, 10, rng_stream(1, "select", t))] += 1
    assert np.all(np.abs(counts - 2000) <= 150)


def test_aggregate_weights():
    w = np.zeros(2)
    d1, d2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.allclose(flcore.aggregate(w, [d1, d2], [1, 3]), [0.25, 0.75])
    assert np.array_equal(flcore.aggregate(w, [d1], [7]), d1)
    p = flcore.aggregation_weights(np.random.default_rng(0).integers(1, 1000, 50))
    assert abs(p.sum() - 1) <= 1e-12


def test_fedavg_round_single_client(small_digits, mclr_digits):
    w = np.zeros(mclr_digits.num_params)
    tp = flcore.TrainParams(2, 5, 0.03)
    new, clients, ups = flcore.fedavg_round(mclr_digits, w, small_digits, [3], tp, 0, 1)
    assert np.array_equal(new, w + ups[0])
    assert np.array_equal(clients[0], w + ups[0])


def test_discrepancy():
    ref = np.zeros(3)
    assert flcore.discrepancy([ref, ref], ref) == 0
    assert flcore.discrepancy([np.array([1.0, 0, 0]), np.array([0, 3.0, 0])], ref) == 2.0
    with pytest.raises(ValueError):
        flcore.discrepancy([np.zeros(2)], ref)
    with pytest.raises(ValueError):
        flcore.discrepancy([], ref)
    rng = np.random.default_rng(0)
    ws = [rng.normal(size=3) for _ in range(4)]
    c = rng.normal(size=3)
    assert flcore.discrepancy([x + c for x in ws], ref + c) == pytest.approx(
        flcore.discrepancy(ws, ref), abs=1e-12)


def _traj(spec, ds, mu, T=5, seed=0, workers=1):
    traj = []
    rows = flcore.run_fedavg(spec, ds, np.zeros(spec.num_params), flcore.TrainParams(2, 10, 0.03, mu),
                             T, 5, seed, workers, traj)
    return rows, traj


def test_fedprox_zero_mu_is_fedavg(small_digits, mclr_digits):
    r0, t0 = _traj(mclr_digits, small_digits, 0.0)
    r1, t1 = _traj(mclr_digits, small_digits, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(t0, t1))
    assert flcore.metrics_csv(r0, "x") == flcore.metrics_csv(r1, "x")


def test_tiny_mu_continuity(small_digits, mclr_digits):
    _, t0 = _traj(mclr_digits, small_digits, 0.0)
    _, t1 = _traj(mclr_digits, small_digits, 1e-9)
    assert max(np.abs(a - b).max() for a, b in zip(t0, t1)) <= 1e-6


def test_threads_do_not_change_results(small_digits, mclr_digits):
    r1, t1 = _traj(mclr_digits, small_digits, 0.0, workers=1)
    r4, t4 = _traj(mclr_digits, small_digits, 0.0, workers=4)
    assert all(np.array_equal(a, b) for a, b in zip(t1, t4))
    assert flcore.metrics_csv(r1, "fedavg") == flcore.metrics_csv(r4, "fedavg")


def test_metrics_csv_schema(small_digits, mclr_digits):
    rows, _ = _traj(mclr_digits, small_digits, 0.0, T=2)
    text = flcore.metrics_csv(rows, "fedavg")
    lines = text.splitlines()
    assert lines[0] == "round,framework,weighted_accuracy,mean_train_loss,discrepancy,num_selected"
    assert lines[1].startswith("1,fedavg,") and lines[1].endswith(",5")
    for r in rows:
        assert 0 <= r.weighted_accuracy <= 1 and r.discrepancy >= 0


def test_evaluate_counts_every_client():
    spec = ModelSpec(models.MCLR, 1, 2)
    w = models.flatten([np.array([[1.0, -1.0]]), np.zeros(2)])
    a = shard(0, np.array([[1.0]]), np.array([0]), (np.array([[1.0], [1.0]]), np.array([0, 0])))
    b = shard(1, np.array([[1.0]]), np.array([0]), (np.array([[1.0], [1.0]]), np.array([1, 0])))
    ds = FederatedDataset((a, b), 2, 1, "partitioned")
    acc, _ = flcore.evaluate(spec, ds, lambda c: w)
    assert acc == 0.75


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("FGLAB_THREADS", raising=False)
    assert flcore.worker_count() == 1
    monkeypatch.setenv("FGLAB_THREADS", "3")
    assert flcore.worker_count() == 3


def test_run_fedavg_matches_hand_loop(small_digits, mclr_digits):
    spec, ds, seed = mclr_digits, small_digits, 3
    E, B, eta, K = 2, 7, 0.05, 4
    w = np.zeros(spec.num_params)
    expect = []
    for t in range(1, 4):
        sel = np.sort(rng_stream(seed, "select", t).choice(len(ds), K, replace=False))
        ups, sizes = [], []
        for c in sel:
            X, y = ds[c].train.features, ds[c].train.labels
            rng = rng_stream(seed, "client", t, int(c))
            cur = w.copy()
            for _ in range(E):
                perm = rng.permutation(len(y))
                for s in range(0, len(y), B):
                    b = Batch(X[perm[s:s + B]], y[perm[s:s + B]])
                    cur = cur - eta * models.prox_gradient(spec, cur, b, w, 0.0)
            ups.append(cur - w)
            sizes.append(len(y))
        p = np.array(sizes) / sum(sizes)
        w = w + sum(pi * u for pi, u in zip(p, ups))
        expect.append(w)
    traj = []
    flcore.run_fedavg(spec, ds, np.zeros(spec.num_params), flcore.TrainParams(E, B, eta, 0.0),
                      3, K, seed, 1, traj)
    for a, b in zip(traj, expect):
        assert np.allclose(a, b, rtol=0, atol=1e-12)
