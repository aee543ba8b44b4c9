"""Numerical audit of the group-model divergence bounds.

Clients of a static group train with exact full-batch gradient steps. Next to
them runs a *virtual* group model doing gradient descent on the size-weighted
group loss from the same synchronised start. The harness measures how far
each client iterate drifts from the virtual iterate and checks that against

    h(e) <= delta / L * ((eta * L + 1) ** e - 1)

together with the one-step recursion it is built from, the averaged group
model, and the resulting loss gap.

The divergence constants are maxima over the virtual iterates actually
visited, which is exactly where the argument needs them; ``L_hat`` is an
analytic smoothness bound for softmax regression and ``M_hat`` the largest
gradient norm seen at any audited point, both inflated by 1.1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .datagen import ClientShard, generate_synthetic
from .fedgroup import inter_group_aggregation
from .models import MCLR, ModelSpec
from .numkit import rng_stream

SAFETY = 1.1
REPORT_NOTE = ("delta_kg is the maximum of ||grad F_k(v) - grad F_g(v)|| over the visited "
               "virtual iterates v, the only points where the divergence argument uses it; "
               "L_hat and M_hat carry a 1.1 safety factor")


class BoundConfigError(ValueError):
    """The analysis does not cover this configuration."""


@dataclass
class BoundConstants:
    delta_kg: list            # one array per group, one entry per member
    delta: float
    L_hat: float
    M_hat: float
    eta: float
    E: int
    eta_g: float = 0.0
    num_groups: int = 1
    group_weights: list = field(default_factory=list)    # p_g
    client_weights: list = field(default_factory=list)   # p_k within each group

    def __post_init__(self):
        if not self.L_hat > 0:
            raise ValueError("L_hat must be positive")
        vals = [self.delta, self.M_hat, self.eta, self.E, self.eta_g, self.num_groups]
        if any(v < 0 for v in vals) or any(np.any(np.asarray(d) < 0) for d in self.delta_kg):
            raise ValueError("bound constants must be non-negative")

    def group_delta(self, g: int) -> float:
        """``sum_k p_k delta_kg`` for one group."""
        return float(np.dot(self.client_weights[g], self.delta_kg[g]))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["delta_kg"] = [np.asarray(x, dtype=float).tolist() for x in self.delta_kg]
        d["group_weights"] = np.asarray(self.group_weights, dtype=float).tolist()
        d["client_weights"] = [np.asarray(x, dtype=float).tolist() for x in self.client_weights]
        return d


@dataclass
class BoundReport:
    constants: BoundConstants
    rows: list                 # audited inequalities, one dict each
    violations: int
    loss_gap: list             # per (round, group): measured gap and its bounds
    informative: list = field(default_factory=list)
    note: str = REPORT_NOTE

    def by_kind(self, kind: str) -> list:
        return [r for r in self.rows if r["kind"] == kind]

    def to_json(self) -> str:
        return json.dumps({
            "note": self.note,
            "constants": self.constants.as_dict(),
            "violations": self.violations,
            "rows": self.rows,
            "loss_gap": self.loss_gap,
            "informative": self.informative,
        }, indent=1, sort_keys=True)


@dataclass(frozen=True)
class BoundConfig:
    model: str = MCLR
    n_groups: int = 3
    min_clients: int = 2
    max_clients: int = 4
    E: int = 20
    rounds: int = 10
    eta: float | None = None      # None: eta_scale / L_hat
    eta_scale: float = 0.5
    eta_g: float = 0.0
    B: int | None = None          # None or >= every shard size: full batch
    mu: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    size_high: int = 300
    seed: int = 0


def _weights(shards) -> np.ndarray:
    n = np.array([s.n_train for s in shards], dtype=np.float64)
    return n / n.sum()


def _grad(spec, w, shard: ClientShard) -> np.ndarray:
    return models.loss_grad_arrays(spec, w, shard.train.features, shard.train.labels)[1]


def group_loss(spec: ModelSpec, shards, w) -> float:
    """``F_g(w) = sum_k p_k F_k(w)``."""
    return float(sum(p * models.loss(spec, w, s.train) for p, s in zip(_weights(shards), shards)))


def group_gradient(spec: ModelSpec, shards, w) -> np.ndarray:
    out = np.zeros(spec.num_params)
    for p, s in zip(_weights(shards), shards):
        out += p * _grad(spec, w, s)
    return out


def client_trajectory(spec: ModelSpec, shard: ClientShard, w_t, E: int, eta: float) -> list:
    """``E + 1`` full-batch gradient iterates of one client, starting at ``w_t``."""
    cur = np.array(w_t, dtype=np.float64)
    out = [cur.copy()]
    for _ in range(E):
        cur = cur - eta * _grad(spec, cur, shard)
        out.append(cur.copy())
    return out


def virtual_trajectory(spec: ModelSpec, shards, w_t, E: int, eta: float) -> list:
    """``E + 1`` gradient-descent iterates on the group loss, starting at ``w_t``."""
    if len(shards) == 0:
        raise ValueError("empty group")
    cur = np.array(w_t, dtype=np.float64)
    out = [cur.copy()]
    for _ in range(E):
        cur = cur - eta * group_gradient(spec, shards, cur)
        out.append(cur.copy())
    return out


def mclr_smoothness(shards) -> float:
    """Upper bound on the smoothness of every client's softmax-regression loss.

    The Hessian block structure gives ``L_k <= 0.5 * lambda_max(X~^T X~ / n_k)``
    with ``X~`` the features plus a bias column; the maximum over clients is
    inflated by the safety factor.
    """
    best = 0.0
    for s in shards:
        X = s.train.features
        Xt = np.hstack([X, np.ones((X.shape[0], 1))])
        lam = float(np.linalg.eigvalsh(Xt.T @ Xt / X.shape[0])[-1])
        best = max(best, 0.5 * lam)
    if best <= 0:
        raise ValueError("degenerate features: zero smoothness bound")
    return SAFETY * best


def estimate_constants(spec: ModelSpec, groups, trajectories, eta: float, E: int,
                       eta_g: float = 0.0, extra_points=None, L_hat: float | None = None
                       ) -> BoundConstants:
    """Constants from visited virtual iterates.

    ``groups`` is a list of shard lists and ``trajectories[g]`` the virtual
    iterates of group ``g`` at which gradients were compared. ``extra_points``
    (per group) only enter ``M_hat``.
    """
    if len(groups) != len(trajectories):
        raise ValueError("one trajectory per group expected")
    if any(len(tr) == 0 for tr in trajectories):
        raise ValueError("empty trajectory")
    extra_points = extra_points or [[] for _ in groups]
    if L_hat is None:
        L_hat = mclr_smoothness([s for g in groups for s in g])
    delta_kg, p_k, gmax = [], [], 0.0
    for shards, traj, extra in zip(groups, trajectories, extra_points):
        w = _weights(shards)
        dk = np.zeros(len(shards))
        for v in traj:
            grads = [_grad(spec, v, s) for s in shards]
            gg = sum(p * g for p, g in zip(w, grads))
            gmax = max(gmax, float(np.linalg.norm(gg)), *(float(np.linalg.norm(g)) for g in grads))
            dk = np.maximum(dk, [np.linalg.norm(g - gg) for g in grads])
        for v in extra:
            gmax = max(gmax, float(np.linalg.norm(group_gradient(spec, shards, v))))
        delta_kg.append(dk)
        p_k.append(w)
    sizes = np.array([sum(s.n_train for s in g) for g in groups], dtype=np.float64)
    p_g = sizes / sizes.sum()
    delta = float(sum(pg * np.dot(pk, dk) for pg, pk, dk in zip(p_g, p_k, delta_kg)))
    return BoundConstants(delta_kg, delta, float(L_hat), SAFETY * gmax, float(eta), int(E),
                          float(eta_g), len(groups), p_g, p_k)


def _growth(c: BoundConstants, e: int) -> float:
    """``((eta L + 1) ** e - 1) / L`` evaluated without cancellation."""
    return float(np.expm1(e * np.log1p(c.eta * c.L_hat))) / c.L_hat


def divergence_bound(c: BoundConstants, e: int, delta: float | None = None) -> float:
    """``delta / L * ((eta L + 1) ** e - 1)``; ``delta`` defaults to the aggregate."""
    if e < 0:
        raise ValueError("e must be >= 0")
    d = c.delta if delta is None else delta
    return d * _growth(c, e)


def loss_gap_bound(c: BoundConstants, with_aggregation: bool = False) -> float:
    """``delta M / L * ((eta L + 1) ** E - 1)``, plus ``eta_g (|G| - 1)`` if requested."""
    base = c.delta * c.M_hat * _growth(c, c.E)
    if not with_aggregation:
        return base
    extra = c.eta_g * (c.num_groups - 1)
    return base + extra if extra != 0 else base


def _violated(measured: float, bound: float) -> bool:
    return measured > bound + 1e-9 * (1.0 + bound)


def _build_groups(cfg: BoundConfig):
    rng = rng_stream(cfg.seed, "bounds")
    sizes = rng.integers(cfg.min_clients, cfg.max_clients + 1, size=cfg.n_groups)
    ds = generate_synthetic(cfg.alpha, cfg.beta, int(sizes.sum()), rng, size_high=cfg.size_high)
    groups, pos = [], 0
    for k in sizes:
        groups.append([ds[i] for i in range(pos, pos + int(k))])
        pos += int(k)
    spec = ModelSpec(MCLR, ds.input_dim, ds.num_classes)
    return spec, groups


def verify_bounds(config: BoundConfig = BoundConfig()) -> BoundReport:
    """Run static-group full-gradient training and audit every bound.

    Each group is a block of 2-4 synthetic clients; all clients take part in
    every round. Counted checks: the per-client divergence bound at every
    ``(t, e)``, the one-step recursion, the averaged group model against its
    own ``delta_g`` and the size-weighted aggregate against ``delta``, and the
    loss gap against ``M_hat`` times the distance bound. With ``eta_g > 0`` the
    printed closed form without the ``M`` factor on the extra term is kept for
    reference only.
    """
    cfg = config
    if cfg.model != MCLR:
        raise BoundConfigError("bound verification needs the convex MCLR model")
    if cfg.mu != 0:
        raise BoundConfigError("bound verification needs mu = 0")
    spec, groups = _build_groups(cfg)
    if cfg.B is not None and any(cfg.B < s.n_train for g in groups for s in g):
        raise BoundConfigError("bound verification needs full-batch local steps")
    L_hat = mclr_smoothness([s for g in groups for s in g])
    eta = cfg.eta if cfg.eta is not None else cfg.eta_scale / L_hat
    E = cfg.E

    starts = [np.zeros(spec.num_params) for _ in groups]
    record = []          # (t, g, client trajectories, virtual trajectory, averaged, post-agg)
    for t in range(1, cfg.rounds + 1):
        round_rec, averaged = [], []
        for g, shards in enumerate(groups):
            ctraj = [client_trajectory(spec, s, starts[g], E, eta) for s in shards]
            vtraj = virtual_trajectory(spec, shards, starts[g], E, eta)
            w_avg = sum(p * tr[-1] for p, tr in zip(_weights(shards), ctraj))
            averaged.append(w_avg)
            round_rec.append((ctraj, vtraj))
        post = inter_group_aggregation(averaged, cfg.eta_g)
        for g in range(len(groups)):
            record.append((t, g, round_rec[g][0], round_rec[g][1], averaged[g], post[g]))
        starts = post

    trajs = [[] for _ in groups]
    extra = [[] for _ in groups]
    for t, g, _, vtraj, w_avg, w_post in record:
        trajs[g].extend(vtraj[:-1])
        extra[g].extend([vtraj[-1], w_avg, w_post])
    c = estimate_constants(spec, groups, trajs, eta, E, cfg.eta_g, extra, L_hat=L_hat)

    rows, gaps, info = [], [], []
    step = eta * L_hat + 1.0
    agg_term = cfg.eta_g * (len(groups) - 1)
    per_round = {}
    for t, g, ctraj, vtraj, w_avg, w_post in record:
        shards = groups[g]
        for k, tr in enumerate(ctraj):

            dk = float(c.delta_kg[g][k])
            h_prev = 0.0
            for e in range(E + 1):
                h = float(np.linalg.norm(tr[e] - vtraj[e]))
                b = divergence_bound(c, e, dk)
                rows.append(dict(kind="client", t=t, group=g, client=shards[k].client_id, e=e,
                                 measured=h, bound=b, slack=b - h))
                if e > 0:
                    rb = step * h_prev + eta * dk
                    rows.append(dict(kind="recursion", t=t, group=g, client=shards[k].client_id,
                                     e=e, measured=h, bound=rb, slack=rb - h))
                h_prev = h
        dg = c.group_delta(g)
        dist = float(np.linalg.norm(w_avg - vtraj[-1]))
        b = divergence_bound(c, E, dg)
        rows.append(dict(kind="group", t=t, group=g, client=None, e=E, measured=dist, bound=b,
                         slack=b - dist))
        for e in range(E):
            m_e = float(np.linalg.norm(w_avg - vtraj[e]))
            info.append(dict(t=t, group=g, e=e, measured=m_e, bound=b))
        dist_post = float(np.linalg.norm(w_post - vtraj[-1]))
        gap = abs(group_loss(spec, shards, w_post) - group_loss(spec, shards, vtraj[-1]))
        gb = c.M_hat * (b + agg_term)
        rows.append(dict(kind="continuity", t=t, group=g, client=None, e=E, measured=gap,
                         bound=c.M_hat * dist_post, slack=c.M_hat * dist_post - gap))
        rows.append(dict(kind="loss_gap_group", t=t, group=g, client=None, e=E, measured=gap,
                         bound=gb, slack=gb - gap))
        gaps.append(dict(t=t, group=g, gap=gap, bound=gb,
                         closed_form=dg * c.M_hat * _growth(c, E) + agg_term))
        acc = per_round.setdefault(t, [0.0, 0.0])
        acc[0] += c.group_weights[g] * dist
        acc[1] += c.group_weights[g] * gap

    for t, (dist, gap) in sorted(per_round.items()):
        b = divergence_bound(c, E)
        rows.append(dict(kind="aggregate", t=t, group=None, client=None, e=E, measured=dist,
                         bound=b, slack=b - dist))
        gb = c.M_hat * (b + agg_term)
        rows.append(dict(kind="loss_gap", t=t, group=None, client=None, e=E, measured=gap,
                         bound=gb, slack=gb - gap))
        info.append(dict(t=t, group=None, e=E, measured=gap,
                         bound=loss_gap_bound(c, with_aggregation=cfg.eta_g > 0),
                         form="closed_form_loss_gap"))

    violations = sum(_violated(r["measured"], r["bound"]) for r in rows)
    return BoundReport(c, rows, int(violations), gaps, info)
