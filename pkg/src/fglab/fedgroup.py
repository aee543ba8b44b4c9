"""Grouped federated training: FedGroup / FedGrouProx and the FeSEM / IFCA baselines.

A run starts with a *group cold start*: ``alpha * m`` clients pre-train from
the initial model, their updates are clustered into ``m`` groups, and each
group remembers the mean pre-training update of its founders as its
direction. Clients that were not part of the cold start join lazily the first
time they are sampled, going to the group whose direction is closest in
cosine (``client_cold_start``). Membership never changes afterwards.

Each round every group runs FedAvg (or FedProx) over its sampled members,
then ``inter_group_aggregation`` nudges each group towards the normalised
models of the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import clustering, flcore, models
from .datagen import ClientShard, FederatedDataset
from .flcore import RoundMetrics, TrainParams
from .models import ModelSpec
from .numkit import ZeroVectorError, cosine_similarity, rng_stream

EDC = "EDC"
MADC = "MADC"
L2 = "L2"
COSINE = "COSINE"
MEASURES = (EDC, MADC, L2, COSINE)
ABLATIONS = ("none", "RCC", "RAC")

GROUP_INIT_NOTE = (
    "group cold start: founding params = w0 + mean(member pre-training updates), "
    "cold_direction = mean(member pre-training updates); "
    "training starts from {start}"
)


@dataclass(frozen=True)
class GroupingConfig:
    m: int = 3
    alpha: int = 20
    measure: str = EDC
    eta_g: float = 0.0
    ablation: str = "none"
    warm_start: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.eta_g < 0:
            raise ValueError("eta_g must be >= 0")
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")


@dataclass
class GroupState:
    group_id: int
    params: np.ndarray
    cold_direction: np.ndarray
    members: set = field(default_factory=set)


@dataclass
class Assignment:
    client_id: int
    group_id: int
    assignment_round: int
    assignment_dissimilarity: float | None

    def as_dict(self) -> dict:
        d = self.assignment_dissimilarity
        return {"client_id": self.client_id, "group_id": self.group_id,
                "assignment_round": self.assignment_round,
                "assignment_dissimilarity": None if d is None else float(d)}


@dataclass
class ColdStart:
    groups: list
    client_ids: np.ndarray
    updates: np.ndarray
    labels: np.ndarray


@dataclass
class RunResult:
    metrics: list
    groups: list = field(default_factory=list)
    assignments: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    cold_start: ColdStart | None = None
    note: str = ""

    def audit(self) -> dict:
        return {"note": self.note,
                "clients": [self.assignments[c].as_dict() for c in sorted(self.assignments)]}


def pretrain_update(spec, shard: ClientShard, w0, train: TrainParams, seed: int) -> np.ndarray:
    """Pre-training update of a client from the initial model (own rng stream)."""
    rng = rng_stream(seed, "pretrain", shard.client_id)
    return flcore.client_update(spec, shard, w0, train.E, train.B, train.eta, train.mu, rng)


def cluster_updates(updates: np.ndarray, m: int, measure: str, rng) -> np.ndarray:
    if measure == EDC:
        F, _ = clustering.edc_features(updates, m)
        return clustering.kmeans_pp(F, m, rng).labels
    if measure == MADC:
        P = clustering.madc_matrix(clustering.similarity_matrix(updates))
        return clustering.hierarchical_complete(P, m).labels
    if measure == COSINE:
        P = (1.0 - clustering.similarity_matrix(updates)) / 2.0
        np.fill_diagonal(P, 0.0)
        return clustering.hierarchical_complete(P, m).labels
    return clustering.kmeans_pp(updates, m, rng).labels


def group_cold_start(spec, dataset: FederatedDataset, w0, cfg: GroupingConfig,
                     train: TrainParams, seed: int, workers=None) -> ColdStart:
    n_pre = cfg.alpha * cfg.m
    if n_pre > len(dataset):
        raise ValueError(f"cold start needs alpha*m = {n_pre} clients, dataset has {len(dataset)}")
    w0 = np.asarray(w0, dtype=np.float64)
    ids = np.sort(rng_stream(seed, "coldstart").choice(len(dataset), n_pre, replace=False))
    updates = np.array(flcore.parallel_map(
        lambda c: pretrain_update(spec, dataset[int(c)], w0, train, seed), ids, workers))

    if cfg.ablation == "RCC":
        rng = rng_stream(seed, "rcc")
        labels = rng.integers(cfg.m, size=n_pre)
        while len(np.unique(labels)) < cfg.m:
            labels = rng.integers(cfg.m, size=n_pre)
    else:
        labels = cluster_updates(updates, cfg.m, cfg.measure, rng_stream(seed, "kmeans"))

    groups = []
    for g in range(cfg.m):
        mask = labels == g
        if not mask.any():
            raise RuntimeError(f"clustering left group {g} empty")
        direction = updates[mask].mean(axis=0)
        groups.append(GroupState(g, w0 + direction, direction,
                                 {int(c) for c in ids[mask]}))
    return ColdStart(groups, ids, updates, np.asarray(labels))


def cold_start_dissimilarity(update, groups) -> np.ndarray:
    return np.array([(1.0 - cosine_similarity(g.cold_direction, update)) / 2.0 for g in groups])


def client_cold_start(newcomer_update, groups, ablation: str = "none",
                      rng: np.random.Generator | None = None) -> int:
    """Group whose founding direction is closest in cosine to the newcomer's update.

    With ``ablation="RAC"`` the group is drawn uniformly at random instead.
    """
    if np.linalg.norm(newcomer_update) == 0.0:
        raise ZeroVectorError("newcomer update is zero")
    if ablation == "RAC":
        if rng is None:
            raise ValueError("RAC assignment needs an rng")
        return int(rng.integers(len(groups)))
    return int(np.argmin(cold_start_dissimilarity(newcomer_update, groups)))


def intra_group_update(spec, group: GroupState, selected_members, dataset: FederatedDataset,
                       train: TrainParams, seed: int, round_: int, workers=None) -> np.ndarray:
    selected_members = sorted(int(c) for c in selected_members)
    if not selected_members:
        return group.params
    new_w, _, _ = flcore.fedavg_round(spec, group.params, dataset, selected_members,
                                      train, seed, round_, workers)
    return new_w


def inter_group_aggregation(group_params, eta_g: float) -> list[np.ndarray]:
    """Add ``eta_g`` times the sum of the other groups' unit-normalised models.

    All groups read the same pre-aggregation snapshot.
    """
    params = [np.asarray(p, dtype=np.float64) for p in group_params]
    if eta_g == 0 or len(params) == 1:
        return [p.copy() for p in params]
    norms = [np.linalg.norm(p) for p in params]
    if any(nm == 0.0 for nm in norms):
        raise ZeroVectorError("inter-group aggregation got a zero group model")
    units = [p / nm for p, nm in zip(params, norms)]
    total = np.sum(units, axis=0)
    return [p + eta_g * (total - u) for p, u in zip(params, units)]


def fesem_assign(client_w, group_params) -> int:
    client_w = np.asarray(client_w, dtype=np.float64)
    d = [np.linalg.norm(client_w - np.asarray(g, dtype=np.float64)) for g in group_params]
    return int(np.argmin(d))


def ifca_assign(spec, shard: ClientShard, group_params) -> int:
    losses = [models.loss(spec, g, shard.train) for g in group_params]
    return int(np.argmin(losses))


def weighted_accuracy(group_results) -> float:
    """``sum(correct) / sum(test_size)`` over ``(test_size, correct)`` pairs."""
    sizes = sum(int(s) for s, _ in group_results)
    if sizes <= 0:
        raise ValueError("total test size is zero")
    if any(int(s) <= 0 for s, _ in group_results):
        raise ValueError("every group needs a positive test size")
    wrong = sum(int(s) - int(c) for s, c in group_results)
    return 1.0 - wrong / sizes


def _global_of(params: list) -> np.ndarray:
    if len(params) == 1:
        return params[0].copy()
    return np.mean(params, axis=0)


def _train_groups(spec, dataset, sel, group_of, params, train, seed, t, workers):
    """Local training for every selected client from its group's model.

    Returns the pre-aggregation group models and, per client, the model it
    started from and its trained local model.
    """
    sel = [int(c) for c in sel]
    starts = [params[group_of[c]] for c in sel]
    updates = flcore.local_updates(spec, dataset, sel, starts, train, seed, t, workers)
    tilde = []
    for g, p in enumerate(params):
        idx = [k for k, c in enumerate(sel) if group_of[c] == g]
        if not idx:
            tilde.append(p)
            continue
        sizes = [dataset[sel[k]].n_train for k in idx]
        tilde.append(flcore.aggregate(p, [updates[k] for k in idx], sizes))
    local = {c: s + u for c, s, u in zip(sel, starts, updates)}
    return tilde, dict(zip(sel, starts)), local


def _round_metrics(spec, dataset, t, sel, group_of, params, starts, local) -> RoundMetrics:
    aux = _global_of(params)
    acc, tl = flcore.evaluate(
        spec, dataset, lambda c: params[group_of[c]] if c in group_of else aux)
    # each client is compared with the group model it was broadcast this round
    disc = float(np.mean([np.linalg.norm(local[c] - starts[c]) for c in local]))
    return RoundMetrics(t, acc, tl, disc, [int(c) for c in sel])


def run_fedgroup(spec: ModelSpec, dataset: FederatedDataset, w0, train: TrainParams,
                 grouping: GroupingConfig, T: int, K: int, seed: int,
                 workers=None) -> RunResult:
    """FedGroup (``mu = 0``) / FedGrouProx (``mu > 0``) for ``T`` rounds.

    Clients never assigned to a group are evaluated with the auxiliary global
    model (unweighted mean of the group models).
    """
    if not 1 <= K <= len(dataset):
        raise ValueError(f"K must be in [1, {len(dataset)}]")
    w0 = np.asarray(w0, dtype=np.float64)
    cs = group_cold_start(spec, dataset, w0, grouping, train, seed, workers)
    groups = cs.groups
    assignments = {}
    group_of = {}
    for g in groups:
        for c in sorted(g.members):
            group_of[c] = g.group_id
            assignments[c] = Assignment(c, g.group_id, 0, None)
    params = [g.params.copy() if grouping.warm_start else w0.copy() for g in groups]
    rac_rng = rng_stream(seed, "rac")
    out, traj = [], []
    for t in range(1, T + 1):
        sel = flcore.select_clients(t, K, len(dataset), rng_stream(seed, "select", t))
        cold = [int(c) for c in sel if int(c) not in group_of]
        pre = flcore.parallel_map(
            lambda c: pretrain_update(spec, dataset[c], w0, train, seed), cold, workers)
        for c, u in zip(cold, pre):
            diss = cold_start_dissimilarity(u, groups)
            g = client_cold_start(u, groups, grouping.ablation, rac_rng)
            groups[g].members.add(c)
            group_of[c] = g
            assignments[c] = Assignment(c, g, t, float(diss[g]))
        tilde, starts, local = _train_groups(spec, dataset, sel, group_of, params, train,
                                             seed, t, workers)
        params = inter_group_aggregation(tilde, grouping.eta_g)
        for g, p in zip(groups, params):
            g.params = p
        out.append(_round_metrics(spec, dataset, t, sel, group_of, params, starts, local))
        traj.append(_global_of(params))
    start = "the cold-start params" if grouping.warm_start else "w0 for every group"
    return RunResult(out, groups, assignments, traj, cs, GROUP_INIT_NOTE.format(start=start))


def _random_groups(spec, w0, m, seed, scale):
    rng = rng_stream(seed, "group_init")
    return [np.asarray(w0, dtype=np.float64) + scale * rng.standard_normal(spec.num_params)
            for _ in range(m)]


def run_reassigning(rule: str, spec: ModelSpec, dataset: FederatedDataset, w0,
                    train: TrainParams, m: int, T: int, K: int, seed: int,
                    init_scale: float = 0.1, workers=None) -> RunResult:
    """FeSEM (``rule="fesem"``) or IFCA (``rule="ifca"``) baseline loop.

    Group models start at ``w0`` plus Gaussian noise. Every round each sampled
    client is re-assigned (nearest group model in L2 for FeSEM, lowest training
    loss for IFCA) before intra-group training. FeSEM compares a client's latest
    local model, or its pre-training result if it has never trained.
    """
    if rule not in ("fesem", "ifca"):
        raise ValueError(f"unknown rule {rule!r}")
    params = _random_groups(spec, w0, m, seed, init_scale)
    last_local: dict[int, np.ndarray] = {}
    group_of: dict[int, int] = {}
    assignments = {}
    out, traj = [], []
    for t in range(1, T + 1):
        sel = [int(c) for c in flcore.select_clients(t, K, len(dataset),
                                                     rng_stream(seed, "select", t))]
        if rule == "fesem":
            fresh = [c for c in sel if c not in last_local]
            pre = flcore.parallel_map(
                lambda c: pretrain_update(spec, dataset[c], w0, train, seed), fresh, workers)
            for c, u in zip(fresh, pre):
                last_local[c] = np.asarray(w0, dtype=np.float64) + u
            for c in sel:
                d = [np.linalg.norm(last_local[c] - p) for p in params]
                g = fesem_assign(last_local[c], params)
                group_of[c] = g
                assignments[c] = Assignment(c, g, t, float(d[g]))
        else:
            for c in sel:
                losses = [models.loss(spec, p, dataset[c].train) for p in params]
                g = int(np.argmin(losses))
                group_of[c] = g
                assignments[c] = Assignment(c, g, t, float(losses[g]))
        tilde, starts, local = _train_groups(spec, dataset, sel, group_of, params, train,
                                             seed, t, workers)
        last_local.update(local)
        params = tilde
        out.append(_round_metrics(spec, dataset, t, sel, group_of, params, starts, local))
        traj.append(_global_of(params))
    groups = [GroupState(g, p, np.zeros_like(p), {c for c, k in group_of.items() if k == g})
              for g, p in enumerate(params)]
    return RunResult(out, groups, assignments, traj, None,
                     f"{rule}: clients re-assigned every round; record holds the latest assignment")
