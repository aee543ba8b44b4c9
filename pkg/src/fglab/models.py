"""Softmax classifiers over flat parameter vectors.

Two model kinds are supported:

* ``MCLR`` - multinomial logistic regression, parameters ``[W (in x C), b (C)]``
* ``MLP``  - one ReLU hidden layer, parameters ``[W1, b1, W2, b2]``

Parameters always travel as a flat float64 vector (row-major blocks in the
order above) so that aggregation and similarity code never needs to know the
model structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MCLR = "MCLR"
MLP = "MLP"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_units: int = 0

    def __post_init__(self):
        if self.kind not in (MCLR, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if self.kind == MLP and self.hidden_units < 1:
            raise ValueError("MLP needs hidden_units >= 1")
        if self.kind == MCLR and self.hidden_units != 0:
            raise ValueError("MCLR has no hidden layer")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, c, h = self.input_dim, self.num_classes, self.hidden_units
        if self.kind == MCLR:
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


def parameter_count(kind: str, input_dim: int, num_classes: int, hidden_units: int = 0) -> int:
    return ModelSpec(kind, input_dim, num_classes, hidden_units).num_params


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"bad batch shapes {X.shape} / {y.shape}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


@dataclass
class ModelParams:
    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.num_params,):
            raise ValueError(
                f"expected {self.spec.num_params} parameters, got {self.flat.shape}"
            )


def unflatten(spec: ModelSpec, flat) -> list[np.ndarray]:
    """Views into ``flat`` with the block shapes of ``spec``."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got {flat.shape}")
    out, pos = [], 0
    for shape in spec.shapes:
        size = int(np.prod(shape))
        out.append(flat[pos:pos + size].reshape(shape))
        pos += size
    return out


def flatten(blocks) -> np.ndarray:
    return np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in blocks])


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """MCLR starts at zero; MLP weights are Glorot-uniform, biases zero."""
    if spec.kind == MCLR:
        return np.zeros(spec.num_params)
    if rng is None:
        raise ValueError("MLP initialisation needs an rng")
    blocks = []
    for shape in spec.shapes:
        if len(shape) == 2:
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            blocks.append(rng.uniform(-s, s, size=shape))
        else:
            blocks.append(np.zeros(shape))
    return flatten(blocks)


def _check(spec: ModelSpec, w, X):
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"feature dim {X.shape[1]} != model input_dim {spec.input_dim}")
    return unflatten(spec, w)


def logits(spec: ModelSpec, w, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    blocks = _check(spec, w, X)
    if spec.kind == MCLR:
        W, b = blocks
        return X @ W + b
    W1, b1, W2, b2 = blocks
    return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean softmax cross-entropy."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    lp = _log_softmax(logits(spec, w, batch.features))
    return float(-lp[np.arange(len(batch)), batch.labels].mean())


def loss_and_gradient(spec: ModelSpec, w, batch: Batch) -> tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return loss_grad_arrays(spec, w, batch.features, batch.labels)


def loss_grad_arrays(spec: ModelSpec, w, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and gradient on raw arrays; the hot path of every local solver."""
    n = X.shape[0]
    blocks = _check(spec, w, X)
    rows = np.arange(n)
    if spec.kind == MCLR:
        W, b = blocks
        lp = _log_softmax(X @ W + b)
        P = np.exp(lp)
        P[rows, y] -= 1.0
        P /= n
        grad = np.concatenate([(X.T @ P).ravel(), P.sum(axis=0)])
    else:
        W1, b1, W2, b2 = blocks
        pre = X @ W1 + b1
        H = np.maximum(pre, 0.0)
        lp = _log_softmax(H @ W2 + b2)
        P = np.exp(lp)
        P[rows, y] -= 1.0
        P /= n
        dH = (P @ W2.T) * (pre > 0)
        grad = np.concatenate([
            (X.T @ dH).ravel(), dH.sum(axis=0), (H.T @ P).ravel(), P.sum(axis=0),
        ])
    return float(-lp[rows, y].mean()), grad


def gradient(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    return loss_and_gradient(spec, w, batch)[1]


def prox_gradient(spec: ModelSpec, w, batch: Batch, anchor, mu: float) -> np.ndarray:
    """Gradient of ``loss + mu/2 * ||w - anchor||^2``."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    g = gradient(spec, w, batch)
    if mu == 0:
        return g
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != g.shape:
        raise ValueError("anchor dimension mismatch")
    return g + mu * (np.asarray(w, dtype=np.float64) - anchor)


def predict(spec: ModelSpec, w, X) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits(spec, w, X), axis=1)


def correct_count(spec: ModelSpec, w, batch: Batch) -> int:
    return int(np.sum(predict(spec, w, batch.features) == batch.labels))


def accuracy(spec: ModelSpec, w, batch: Batch) -> float:
    if len(batch) == 0:
        raise ValueError("empty test set")
    return correct_count(spec, w, batch) / len(batch)
