"""Federated dataset construction.

Three sources of client shards:

* :func:`generate_synthetic` - the Synthetic(alpha, beta) family, one
  logistic-regression generator per client.
* :func:`partition_noniid` - split a labelled pool into label-limited shards
  with power-law sizes (used with :func:`make_digits` or IDX images).
* :func:`load_idx` - MNIST-style IDX files.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Batch

SYNTHETIC = "synthetic"
PARTITIONED = "partitioned"
INGESTED = "ingested"


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: Batch
    test: Batch

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class FederatedDataset:
    shards: tuple
    num_classes: int
    input_dim: int
    provenance: str

    def __post_init__(self):
        ids = [s.client_id for s in self.shards]
        if ids != list(range(len(ids))):
            raise ValueError("client ids must be dense 0..n-1 in order")
        if sum(s.n_train for s in self.shards) == 0:
            raise ValueError("dataset has no training data")
        object.__setattr__(self, "shards", tuple(self.shards))

    def __len__(self):
        return len(self.shards)

    def __getitem__(self, i) -> ClientShard:
        return self.shards[i]


def power_law_sizes(n: int, rng: np.random.Generator, shape: float = 1.5,
                    low: int = 10, high: int = 1000) -> np.ndarray:
    """Client sizes ``low * (1 + Lomax(shape))`` clipped to ``[low, high]``."""
    raw = low * (1.0 + rng.pareto(shape, size=n))
    return np.clip(np.floor(raw), low, high).astype(np.int64)


def _split(idx: np.ndarray, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(idx)
    n_test = min(max(1, int(round(test_fraction * len(idx)))), len(idx) - 1)
    return idx[n_test:], idx[:n_test]


def generate_synthetic(alpha: float, beta: float, n_clients: int, rng: np.random.Generator,
                       input_dim: int = 60, num_classes: int = 10, test_fraction: float = 0.1,
                       size_low: int = 10, size_high: int = 1000) -> FederatedDataset:
    """Synthetic(alpha, beta): client ``k`` labels ``x ~ N(v_k, diag(j^-1.2))``
    with ``argmax(softmax(W_k x + b_k))``.

    ``alpha`` and ``beta`` are the variances of the per-client model mean
    ``u_k`` and feature-mean offset ``B_k``.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta are variances and must be non-negative")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    sizes = power_law_sizes(n_clients, rng, low=size_low, high=size_high)
    cov_diag = np.arange(1, input_dim + 1, dtype=np.float64) ** -1.2
    shards = []
    for k in range(n_clients):
        u = rng.normal(0.0, np.sqrt(alpha))
        B = rng.normal(0.0, np.sqrt(beta))
        W = rng.normal(u, 1.0, size=(input_dim, num_classes))
        b = rng.normal(u, 1.0, size=num_classes)
        v = rng.normal(B, 1.0, size=input_dim)
        X = v + rng.standard_normal((sizes[k], input_dim)) * np.sqrt(cov_diag)
        y = np.argmax(X @ W + b, axis=1)
        tr, te = _split(np.arange(sizes[k]), test_fraction, rng)
        shards.append(ClientShard(k, Batch(X[tr], y[tr]), Batch(X[te], y[te])))
    return FederatedDataset(tuple(shards), num_classes, input_dim, SYNTHETIC)


def partition_noniid(features, labels, n_clients: int, classes_per_client: int,
                     rng: np.random.Generator, test_fraction: float = 0.2,
                     num_classes: int | None = None, pool_fraction: float = 1.0,
                     size_low: int = 10, size_high: int = 1000) -> FederatedDataset:
    """Split a labelled pool into shards holding at most ``classes_per_client`` labels.

    Relative shard sizes follow :func:`power_law_sizes`; they are then scaled
    so that the shards use ``pool_fraction`` of the pool. If a class cannot
    cover its demand, every share of it above a small reserved floor is
    scaled down by the same factor. Samples are drawn without
    replacement, so no example lands in two shards. When every class is
    allowed the shard is a uniform draw from the whole pool (IID).
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree on sample count")
    C = int(num_classes if num_classes is not None else y.max() + 1)
    if not 1 <= classes_per_client <= C:
        raise ValueError(f"classes_per_client must be in [1, {C}]")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")

    if not 0 < pool_fraction <= 1:
        raise ValueError("pool_fraction must be in (0, 1]")
    if n_clients * 2 > len(y):
        raise ValueError("infeasible: fewer samples than two per client")
    weights = power_law_sizes(n_clients, rng, low=size_low, high=size_high)
    budget = pool_fraction * len(y)
    sizes = np.maximum(2, np.floor(weights * budget / weights.sum())).astype(np.int64)
    while sizes.sum() > len(y):
        sizes = np.maximum(2, sizes - 1)
    iid = classes_per_client == C
    if iid:
        order = rng.permutation(len(y))
        picks, pos = [], 0
        for s in sizes:
            picks.append(order[pos:pos + s])
            pos += s
    else:
        pools = [rng.permutation(np.flatnonzero(y == c)) for c in range(C)]
        supply = np.array([len(p) for p in pools])
        class_sets = [np.sort(rng.choice(C, classes_per_client, replace=False))
                      for _ in range(n_clients)]
        slots = np.zeros(C, dtype=np.int64)
        for cs in class_sets:
            slots[cs] += 1
        if np.any(slots > supply):
            bad = int(np.argmax(slots - supply))
            raise ValueError(f"infeasible: class {bad} has {supply[bad]} samples "
                             f"for {slots[bad]} client slots")
        # per-client per-class counts, remainder spread over a random subset
        floor_ = 1 if classes_per_client > 1 else 2
        counts = []
        for s, cs in zip(sizes, class_sets):
            base = np.full(len(cs), s // len(cs))
            base[rng.permutation(len(cs))[: s % len(cs)]] += 1
            counts.append(np.maximum(base, floor_))
        demand = np.zeros(C, dtype=np.int64)
        for cnt, cs in zip(counts, class_sets):
            demand[cs] += cnt
        reserve = slots * floor_
        if np.any(reserve > supply):
            bad = int(np.argmax(reserve - supply))
            raise ValueError(f"infeasible: class {bad} has {supply[bad]} samples "
                             f"for {reserve[bad]} reserved")
        # an oversubscribed class shrinks every share above the reserved floor
        ratio = np.ones(C)
        over = demand > supply
        ratio[over] = (supply[over] - reserve[over]) / (demand[over] - reserve[over])
        counts = [floor_ + np.floor((cnt - floor_) * ratio[cs]).astype(np.int64)
                  for cnt, cs in zip(counts, class_sets)]
        cursor = np.zeros(C, dtype=np.int64)
        picks = []
        for cnt, cs in zip(counts, class_sets):
            chosen = []
            for c, k in zip(cs, cnt):
                chosen.append(pools[c][cursor[c]:cursor[c] + k])
                cursor[c] += k
            picks.append(np.concatenate(chosen))
    shards = []
    for k, idx in enumerate(picks):
        if len(idx) < 2:
            raise ValueError(f"infeasible: client {k} would get {len(idx)} samples")
        tr, te = _split(idx, test_fraction, rng)
        shards.append(ClientShard(k, Batch(X[tr], y[tr]), Batch(X[te], y[te])))
    return FederatedDataset(tuple(shards), C, X.shape[1], PARTITIONED)


# 8x8 glyphs for the digit surrogate; '#' is ink
_GLYPHS = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"],
    ["..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.", "........"],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..", "........"],
    [".....#..", "....##..", "...#.#..", "..#..#..", ".######.", ".....#..", ".....#..", "........"],
    [".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"],
    ["...###..", "..#.....", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###...", "........"],
]


def digit_templates() -> np.ndarray:
    return np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS], dtype=np.float64)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[yd, xd]
    return out


def make_digits(n_per_class: int, rng: np.random.Generator, noise: float = 0.2,
                dropout: float = 0.1, shift_prob: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Desk-scale 8x8 digit images (64 features in [0, 1], 10 classes).

    Each sample is a glyph, shifted by one pixel with probability
    ``shift_prob`` (per axis), with random ink
    intensity, stroke dropout and additive Gaussian noise.
    """
    T = digit_templates()
    n = n_per_class * 10
    labels = np.repeat(np.arange(10), n_per_class)
    labels = labels[rng.permutation(n)]
    X = np.empty((n, 64))
    shifts = rng.choice([-1, 1], size=(n, 2)) * (rng.random((n, 2)) < shift_prob)
    ink = rng.uniform(0.6, 1.0, size=n)
    for i in range(n):
        img = _shift(T[labels[i]], int(shifts[i, 0]), int(shifts[i, 1])) * ink[i]
        img = img * (rng.random((8, 8)) >= dropout)
        X[i] = img.ravel()
    X += noise * rng.standard_normal(X.shape)
    return np.clip(X, 0.0, 1.0), labels


class IDXError(ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IDXTruncatedError(f"{what}: file too short for a magic number")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IDXMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IDXTruncatedError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IDXTruncatedError(f"{what}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair into ``(features in [0,1], labels)``."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def save_jsonl(ds: FederatedDataset, path) -> None:
    """One shard per line; floats are written with round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in ds.shards:
            rec = {
                "id": s.client_id,
                "num_classes": ds.num_classes,
                "provenance": ds.provenance,
                "train_x": s.train.features.tolist(),
                "train_y": s.train.labels.tolist(),
                "test_x": s.test.features.tolist(),
                "test_y": s.test.labels.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> FederatedDataset:
    shards, num_classes, provenance, dim = [], None, None, None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            dim = len(rec["train_x"][0])
            tx = np.asarray(rec["test_x"], dtype=np.float64).reshape(-1, dim)
            shards.append(ClientShard(
                int(rec["id"]),
                Batch(np.asarray(rec["train_x"]), rec["train_y"]),
                Batch(tx, np.asarray(rec["test_y"], dtype=np.int64)),
            ))
            num_classes = rec["num_classes"]
            provenance = rec["provenance"]
    shards.sort(key=lambda s: s.client_id)
    return FederatedDataset(tuple(shards), num_classes, dim, provenance)


def plant_populations(ds: FederatedDataset, n_populations: int,
                      rng: np.random.Generator) -> tuple[FederatedDataset, np.ndarray]:
    """Give each client one of ``n_populations`` incongruent labelings.

    Clients are split into balanced random populations; population ``p``
    relabels ``y -> (y + p * C // n_populations) mod C``. Returns the new
    dataset and each client's population index.
    """
    if not 1 <= n_populations <= ds.num_classes:
        raise ValueError("n_populations must be in [1, num_classes]")
    C = ds.num_classes
    pop = rng.permutation(np.arange(len(ds)) % n_populations)
    shards = []
    for s, p in zip(ds.shards, pop):
        shift = int(p) * C // n_populations
        shards.append(ClientShard(
            s.client_id,
            Batch(s.train.features, (s.train.labels + shift) % C),
            Batch(s.test.features, (s.test.labels + shift) % C),
        ))
    return FederatedDataset(tuple(shards), C, ds.input_dim, ds.provenance), pop
