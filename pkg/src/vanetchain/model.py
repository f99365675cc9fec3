"""Small MLP relay-score model: init, training, FedAvg, serialization.

Parameters live in one flat vector: for each layer the weight matrix
(fan_in x fan_out, row-major) followed by its bias.  Hidden layers use tanh,
the single output a sigmoid, and training minimises mean squared error with
plain mini-batch SGD.  Several models of one architecture can be trained in
lockstep (``train_many``), which is how a round of vehicles trains at once.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .digest import sha256
from .seeding import derive_rng

SCORE_FLOOR = 1e-3
MAGIC = b"MLPW"


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass(frozen=True)
class ModelArch:
    input_dim: int = 5
    hidden_layers: int = 2
    hidden_width: int = 16
    output_dim: int = 1

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        out, pos = [], 0
        for fan_in, fan_out in self.layer_sizes:
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b, (fan_in, fan_out)))
        return out


FULL_ARCH = ModelArch(5, 7, 256, 1)
DESK_ARCH = ModelArch(5, 2, 16, 1)


@dataclass(frozen=True)
class ModelWeights:
    arch: ModelArch
    params: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.params, dtype=np.float64)
        if p.shape != (self.arch.num_params,):
            raise ValueError(f"expected {self.arch.num_params} params, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.params[w].reshape(shape), self.params[b]) for w, b, shape in self.arch.slices()]

    def to_bytes(self) -> bytes:
        a = self.arch
        header = MAGIC + struct.pack("<4I", a.input_dim, a.hidden_layers, a.hidden_width, a.output_dim)
        return header + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if data[:4] != MAGIC:
            raise ValueError("not a serialized model")
        arch = ModelArch(*struct.unpack("<4I", data[4:20]))
        return cls(arch, np.frombuffer(data[20:], dtype="<f8").astype(np.float64))

    def digest(self) -> bytes:
        return sha256(self.to_bytes())

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.params, other.params)

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 8
    rng_seed: int = 0

    def validate(self, prefix: str = "") -> list[str]:
        findings = []
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            findings.append(f"{prefix}learning_rate: must be positive")
        if self.batch_size < 1:
            findings.append(f"{prefix}batch_size: must be >= 1")
        if self.epochs < 0:
            findings.append(f"{prefix}epochs: must be >= 0")
        return findings


def init_weights(arch: ModelArch, rng: np.random.Generator) -> ModelWeights:
    params = np.empty(arch.num_params)
    for w, b, (fan_in, _) in arch.slices():
        bound = 1.0 / math.sqrt(fan_in)
        params[w] = rng.uniform(-bound, bound, w.stop - w.start)
        params[b] = rng.uniform(-bound, bound, b.stop - b.start)
    return ModelWeights(arch, params)


def zero_weights(arch: ModelArch) -> ModelWeights:
    return ModelWeights(arch, np.zeros(arch.num_params))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# batched forward / backward: params P has shape (M, num_params), inputs
# X (M, B, input_dim), targets Y (M, B).  M independent models.


def _unpack(arch: ModelArch, P: np.ndarray):
    m = P.shape[0]
    return [(P[:, w].reshape(m, *shape), P[:, b][:, None, :]) for w, b, shape in arch.slices()]


def forward_batch(arch: ModelArch, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    a = X
    layers = _unpack(arch, P)
    for W, b in layers[:-1]:
        a = np.tanh(a @ W + b)
    W, b = layers[-1]
    return _sigmoid(a @ W + b)[..., 0]


def loss_and_grad_batch(arch: ModelArch, P: np.ndarray, X: np.ndarray, Y: np.ndarray):
    """Per-model MSE and its gradient with respect to the flat parameters."""
    layers = _unpack(arch, P)
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        a = np.tanh(a @ W + b)
        acts.append(a)
    W, b = layers[-1]
    out = _sigmoid(a @ W + b)[..., 0]
    err = out - Y
    nb = X.shape[1]
    loss = np.mean(err * err, axis=1)
    grad = np.empty_like(P)
    delta = (2.0 / nb) * err * out * (1.0 - out)
    delta = delta[..., None]
    slices = arch.slices()
    for li in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, _ = slices[li]
        a_in = acts[li]
        grad[:, w_sl] = (a_in.transpose(0, 2, 1) @ delta).reshape(P.shape[0], -1)
        grad[:, b_sl] = delta.sum(axis=1)
        if li > 0:
            W = layers[li][0]
            delta = (delta @ W.transpose(0, 2, 1)) * (1.0 - acts[li] ** 2)
    return loss, grad


def loss_and_grad(weights: ModelWeights, X, y) -> tuple[float, np.ndarray]:
    X = np.asarray(X, dtype=float)[None]
    y = np.asarray(y, dtype=float)[None]
    loss, grad = loss_and_grad_batch(weights.arch, weights.params[None].copy(), X, y)
    return float(loss[0]), grad[0]


def mse(weights: ModelWeights, X, y) -> float:
    X = np.asarray(X, dtype=float)
    pred = forward_batch(weights.arch, weights.params[None], X[None])[0]
    return float(np.mean((pred - np.asarray(y, dtype=float)) ** 2))


def numeric_gradient(weights: ModelWeights, X, y, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the MSE, one parameter at a time."""
    base = weights.params.copy()
    grad = np.empty_like(base)
    for j in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[j] += step
        lo[j] -= step
        grad[j] = (mse(ModelWeights(weights.arch, hi), X, y) - mse(ModelWeights(weights.arch, lo), X, y)) / (2 * step)
    return grad


def train_many(starts: Sequence[ModelWeights], data: Sequence[tuple[np.ndarray, np.ndarray]],
               cfg: TrainConfig, seeds: Sequence[int]) -> tuple[list[ModelWeights], np.ndarray]:
    """Train len(starts) models in lockstep; every dataset must have equal size.

    Each model shuffles its rows with its own seed, so the result for one
    model does not depend on which others share the batch.
    """
    if not starts:
        return [], np.empty(0)
    arch = starts[0].arch
    for i, w in enumerate(starts):
        if w.arch != arch:
            raise ValueError(f"model {i} has a different architecture")
    sizes = {len(y) for _, y in data}
    if 0 in sizes:
        raise ValueError("training data must be nonempty")
    if len(sizes) != 1:
        raise ValueError("train_many needs equal-size datasets")
    n = sizes.pop()
    X = np.stack([np.asarray(x, dtype=float) for x, _ in data])
    Y = np.stack([np.asarray(y, dtype=float) for _, y in data])
    P = np.stack([w.params for w in starts]).astype(np.float64)
    m = P.shape[0]
    rngs = [derive_rng(int(s), "minibatch") for s in seeds]
    bs = min(cfg.batch_size, n)
    rows = np.arange(m)[:, None]
    # Overflow is detected below and reported as divergence.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = np.stack([r.permutation(n) for r in rngs])
            total = np.zeros(m)
            for start in range(0, n, bs):
                idx = order[:, start:start + bs]
                xb, yb = X[rows, idx], Y[rows, idx]
                loss, grad = loss_and_grad_batch(arch, P, xb, yb)
                total += loss * idx.shape[1]
                P -= cfg.learning_rate * grad
            epoch_loss = total / n
            if not np.all(np.isfinite(epoch_loss)) or not np.all(np.isfinite(P)):
                raise TrainingDivergedError(epoch + 1)
    # Report the mean MSE of the final weights over the full local data.
    pred = forward_batch(arch, P, X)
    final = np.mean((pred - Y) ** 2, axis=1)
    if not np.all(np.isfinite(final)):
        raise TrainingDivergedError(cfg.epochs)
    return [ModelWeights(arch, p) for p in P], final


def train_local(weights: ModelWeights, X, y, cfg: TrainConfig) -> tuple[ModelWeights, float]:
    models, losses = train_many([weights], [(np.asarray(X, dtype=float), np.asarray(y, dtype=float))],
                                cfg, [cfg.rng_seed])
    return models[0], float(losses[0])


def fedavg(models: Sequence[ModelWeights]) -> ModelWeights:
    if not models:
        raise ValueError("fedavg needs at least one model")
    arch = models[0].arch
    for i, w in enumerate(models):
        if w.arch != arch:
            raise ValueError(f"model {i} architecture {w.arch} differs from {arch}")
    # Averaging offsets from the first model keeps identical inputs bit-exact.
    base = models[0].params
    return ModelWeights(arch, base + np.mean(np.stack([w.params - base for w in models]), axis=0))


def global_loss(local_losses: Sequence[float]) -> float:
    if len(local_losses) == 0:
        raise ValueError("global_loss needs at least one local loss")
    vals = [float(x) for x in local_losses]
    if any(not math.isfinite(x) or x < 0 for x in vals):
        raise ValueError("local losses must be finite and non-negative")
    # Exact rational mean, rounded once.
    return float(sum(map(Fraction, vals)) / len(vals))


def predict_scores(weights: ModelWeights, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = forward_batch(weights.arch, weights.params[None], X[None])[0]
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("non-finite activation")
    return np.clip(out, SCORE_FLOOR, 1.0)


def predict_score(weights: ModelWeights, features) -> float:
    return float(predict_scores(weights, features)[0])


@dataclass(frozen=True)
class FeatureScaler:
    """Frozen z-score statistics for features plus a divisor for labels."""

    mean: tuple
    std: tuple
    label_scale: float

    @classmethod
    def fit(cls, rows, label_scale: float | None = None) -> "FeatureScaler":
        feats = np.array([r.features() for r in rows], dtype=float)
        if feats.size == 0:
            raise ValueError("cannot fit a scaler on zero rows")
        std = feats.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        if label_scale is None:
            label_scale = max(max(r.n_a for r in rows), 1)
        return cls(tuple(feats.mean(axis=0).tolist()), tuple(std.tolist()), float(max(label_scale, 1)))

    def features(self, rows) -> np.ndarray:
        feats = np.array([r.features() for r in rows], dtype=float).reshape(-1, len(self.mean))
        return (feats - np.array(self.mean)) / np.array(self.std)

    def transform_raw(self, feats) -> np.ndarray:
        return (np.asarray(feats, dtype=float) - np.array(self.mean)) / np.array(self.std)

    def labels(self, rows) -> np.ndarray:
        return np.array([r.n_a for r in rows], dtype=float) / self.label_scale
