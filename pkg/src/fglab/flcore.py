"""FedAvg / FedProx engine: local solver, client sampling, aggregation, metrics."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models
from .datagen import ClientShard, FederatedDataset
from .models import ModelSpec
from .numkit import rng_stream

METRICS_HEADER = ("round", "framework", "weighted_accuracy", "mean_train_loss",
                  "discrepancy", "num_selected")


@dataclass(frozen=True)
class TrainParams:
    """Local solver settings shared by every framework."""

    E: int = 20
    B: int = 10
    eta: float = 0.03
    mu: float = 0.0

    def __post_init__(self):
        if self.E < 1 or self.B < 1:
            raise ValueError("E and B must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    last_update: np.ndarray | None = None
    group_id: int | None = None


@dataclass
class RoundMetrics:
    round: int
    weighted_accuracy: float
    mean_train_loss: float
    discrepancy: float
    selected: list = field(default_factory=list)

    def row(self, framework: str) -> tuple:
        return (self.round, framework, self.weighted_accuracy, self.mean_train_loss,
                self.discrepancy, len(self.selected))


def worker_count() -> int:
    env = os.environ.get("FGLAB_THREADS")
    if env:
        return max(1, int(env))
    return 1


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def client_update(spec: ModelSpec, shard: ClientShard, w, E: int, B: int, eta: float,
                  mu: float, rng: np.random.Generator) -> np.ndarray:
    """Run ``E`` epochs of (proximal) mini-batch SGD from ``w``; return ``w_end - w``.

    Batches are reshuffled every epoch and the last short batch is kept. When
    ``B`` covers the whole shard every step is an exact full gradient step on
    the data in its stored order.
    """
    X, y = shard.train.features, shard.train.labels
    n = len(y)
    if n == 0:
        raise ValueError(f"client {shard.client_id} has no training data")
    if E < 1 or B < 1 or not eta > 0 or mu < 0:
        raise ValueError("need E >= 1, B >= 1, eta > 0, mu >= 0")
    w0 = np.array(w, dtype=np.float64)
    cur = w0.copy()
    for _ in range(E):
        if B >= n:
            batches = [(X, y)]
        else:
            perm = rng.permutation(n)
            batches = [(X[perm[s:s + B]], y[perm[s:s + B]]) for s in range(0, n, B)]
        for Xb, yb in batches:
            _, g = models.loss_grad_arrays(spec, cur, Xb, yb)
            if mu != 0:
                g = g + mu * (cur - w0)
            cur = cur - eta * g
    return cur - w0


def select_clients(round_: int, K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``K`` of ``n`` clients without replacement, sorted.

    ``rng`` is expected to be the round's own stream, so the result is a
    function of ``(seed, round)`` only.
    """
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    return np.sort(rng.choice(n, size=K, replace=False))


def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(w, updates, sizes) -> np.ndarray:
    """``w + sum_i (n_i / n) * update_i``, accumulated in list order."""
    p = aggregation_weights(sizes)
    acc = np.zeros_like(np.asarray(w, dtype=np.float64))
    for pi, u in zip(p, updates):
        acc += pi * u
    return w + acc


def discrepancy(client_ws, w_ref) -> float:
    """Mean L2 distance from each client model to the reference model."""
    client_ws = [np.asarray(c, dtype=np.float64) for c in client_ws]
    if not client_ws:
        raise ValueError("need at least one client model")
    w_ref = np.asarray(w_ref, dtype=np.float64)
    for c in client_ws:
        if c.shape != w_ref.shape:
            raise ValueError("dimension mismatch")
    return float(np.mean([np.linalg.norm(c - w_ref) for c in client_ws]))


def local_updates(spec, dataset: FederatedDataset, ids, w_start, train: TrainParams,
                  seed: int, round_: int, workers=None) -> list[np.ndarray]:
    """Updates for ``ids``; ``w_start`` is one vector or one per client.

    Every client draws from the stream ``(seed, "client", round, id)``.
    """
    ids = [int(i) for i in ids]
    starts = w_start if isinstance(w_start, (list, tuple)) else [w_start] * len(ids)

    def run(item):
        cid, w = item
        rng = rng_stream(seed, "client", round_, cid)
        return client_update(spec, dataset[cid], w, train.E, train.B, train.eta, train.mu, rng)

    return parallel_map(run, list(zip(ids, starts)), workers)


def fedavg_round(spec, global_w, dataset: FederatedDataset, selected, train: TrainParams,
                 seed: int, round_: int, workers=None):
    """One server round. Returns ``(new_global, client_models, updates)``."""
    selected = [int(i) for i in selected]
    if not selected:
        raise ValueError("no clients selected")
    updates = local_updates(spec, dataset, selected, global_w, train, seed, round_, workers)
    sizes = [dataset[i].n_train for i in selected]
    new_w = aggregate(global_w, updates, sizes)
    return new_w, [global_w + u for u in updates], updates


def evaluate(spec, dataset: FederatedDataset, model_for) -> tuple[float, float]:
    """Weighted test accuracy and sample-weighted train loss.

    ``model_for(client_id)`` gives the parameters a client is evaluated with.
    """
    correct = total = 0
    loss_sum = n_train = 0.0
    for shard in dataset.shards:
        w = model_for(shard.client_id)
        correct += models.correct_count(spec, w, shard.test)
        total += len(shard.test)
        loss_sum += models.loss(spec, w, shard.train) * shard.n_train
        n_train += shard.n_train
    return correct / total, loss_sum / n_train


def run_fedavg(spec: ModelSpec, dataset: FederatedDataset, w0, train: TrainParams, T: int,
               K: int, seed: int, workers=None, trajectory: list | None = None) -> list[RoundMetrics]:
    """FedAvg (``mu = 0``) or FedProx (``mu > 0``) for ``T`` rounds."""
    w = np.array(w0, dtype=np.float64)
    out = []
    for t in range(1, T + 1):
        sel = select_clients(t, K, len(dataset), rng_stream(seed, "select", t))
        w_start = w
        w, client_ws, _ = fedavg_round(spec, w, dataset, sel, train, seed, t, workers)
        acc, tl = evaluate(spec, dataset, lambda cid: w)
        out.append(RoundMetrics(t, acc, tl, discrepancy(client_ws, w_start), sel.tolist()))
        if trajectory is not None:
            trajectory.append(w.copy())
    return out


def metrics_csv(rows: list[RoundMetrics], framework: str) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRICS_HEADER)
    for r in rows:
        wr.writerow([r.round, framework, repr(float(r.weighted_accuracy)),
                     repr(float(r.mean_train_loss)), repr(float(r.discrepancy)),
                     len(r.selected)])
    return buf.getvalue()
