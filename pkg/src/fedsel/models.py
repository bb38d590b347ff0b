"""Softmax regression and a one-hidden-layer MLP over flat parameter vectors.

Both models keep every trainable weight in a single float64 vector so the
federated machinery (compression, aggregation, variance estimates) can treat
parameters as plain points in R^d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import ClientShard, LabeledDataset
from .seeding import as_rng

MODEL_KINDS = ("logistic", "mlp")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_features: int
    n_classes: int
    hidden: int = 50

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def dim(self) -> int:
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return f * c + c
        return f * h + h + h * c + c

    def unpack(self, params: np.ndarray):
        f, c, h = self.n_features, self.n_classes, self.hidden
        if self.kind == "logistic":
            return params[: f * c].reshape(f, c), params[f * c:]
        o = 0
        w1 = params[o:o + f * h].reshape(f, h); o += f * h
        b1 = params[o:o + h]; o += h
        w2 = params[o:o + h * c].reshape(h, c); o += h * c
        b2 = params[o:o + c]
        return w1, b1, w2, b2


@dataclass(frozen=True)
class TrainConfig:
    n_sgd: int = 50
    learning_rate: float = 0.05
    batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_sgd < 1:
            raise ValueError("n_sgd must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def local_epochs(self, n_samples: int) -> int:
        # reported only; n_sgd drives training
        return math.ceil(self.n_sgd * min(self.batch_size, n_samples) / n_samples)


@dataclass(eq=False)
class ClientUpdate:
    client_id: int
    new_params: np.ndarray
    raw_gradient: np.ndarray
    start_loss: float = float("nan")  # full-shard loss at ``start``
    n_samples: int = 0


def init_params(model: ModelSpec, seed=0) -> np.ndarray:
    """Zeros for softmax regression; Xavier-uniform weights, zero biases for the MLP."""
    if model.kind == "logistic":
        return np.zeros(model.dim)
    rng = as_rng(seed)
    f, c, h = model.n_features, model.n_classes, model.hidden
    a1 = math.sqrt(6.0 / (f + h))
    a2 = math.sqrt(6.0 / (h + c))
    return np.concatenate([
        rng.uniform(-a1, a1, f * h), np.zeros(h),
        rng.uniform(-a2, a2, h * c), np.zeros(c),
    ])


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = labels.shape[0]
    loss = float(np.mean(log_norm - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _check(model: ModelSpec, params: np.ndarray, x: np.ndarray):
    if params.shape != (model.dim,):
        raise ValueError(f"params have shape {params.shape}, model expects ({model.dim},)")
    if x.shape[1] != model.n_features:
        raise ValueError(f"data has {x.shape[1]} features, model expects {model.n_features}")


def _loss_grad(model: ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    if model.kind == "logistic":
        w, b = model.unpack(params)
        loss, dlogits = _softmax_xent(x @ w + b, y)
        return loss, np.concatenate([(x.T @ dlogits).ravel(), dlogits.sum(axis=0)])
    w1, b1, w2, b2 = model.unpack(params)
    hidden = np.tanh(x @ w1 + b1)
    loss, dlogits = _softmax_xent(hidden @ w2 + b2, y)
    dhidden = (dlogits @ w2.T) * (1.0 - hidden ** 2)
    return loss, np.concatenate([
        (x.T @ dhidden).ravel(), dhidden.sum(axis=0),
        (hidden.T @ dlogits).ravel(), dlogits.sum(axis=0),
    ])


def loss_and_gradient(model: ModelSpec, params: np.ndarray, data: LabeledDataset):
    """Mean cross-entropy over ``data`` and its exact gradient."""
    params = np.asarray(params, dtype=np.float64)
    _check(model, params, data.features)
    return _loss_grad(model, params, data.features, data.labels)


def predict(model: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    if model.kind == "logistic":
        w, b = model.unpack(params)
        logits = features @ w + b
    else:
        w1, b1, w2, b2 = model.unpack(params)
        logits = np.tanh(features @ w1 + b1) @ w2 + b2
    return np.argmax(logits, axis=1)


def accuracy(model: ModelSpec, params: np.ndarray, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(model, params, data.features) == data.labels))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    # without replacement within a pass, reshuffled every pass
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def client_update(model: ModelSpec, start: np.ndarray, shard: ClientShard, cfg: TrainConfig) -> ClientUpdate:
    """Run ``cfg.n_sgd`` minibatch SGD steps from ``start`` on one client's shard.

    The random stream is keyed by ``(cfg.seed, shard.client_id)``.  The returned
    ``raw_gradient`` is the accumulated pseudo-gradient ``(start - end) / lr`` and
    ``new_params`` is rebuilt from it, so ``start - lr * raw_gradient`` reproduces
    ``new_params`` exactly.
    """
    if shard.n_samples == 0:
        raise ValueError(f"client {shard.client_id} has no data")
    start = np.asarray(start, dtype=np.float64)
    x, y = shard.data.features, shard.data.labels
    _check(model, start, x)
    rng = np.random.default_rng([int(cfg.seed), int(shard.client_id)])
    lr = cfg.learning_rate
    params = start.copy()
    batches = _minibatches(shard.n_samples, cfg.batch_size, rng)
    # overflow is expected when training blows up; it is reported as DivergenceError instead
    with np.errstate(over="ignore", invalid="ignore"):
        start_loss, _ = _loss_grad(model, start, x, y)
        for step in range(cfg.n_sgd):
            idx = next(batches)
            loss, grad = _loss_grad(model, params, x[idx], y[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"client {shard.client_id}: non-finite loss at step {step}", step)
            params -= lr * grad
        if not np.all(np.isfinite(params)):
            raise DivergenceError(f"client {shard.client_id}: non-finite parameters after step {cfg.n_sgd - 1}",
                                  cfg.n_sgd - 1)
        raw = (start - params) / lr
    return ClientUpdate(shard.client_id, start - lr * raw, raw, start_loss, shard.n_samples)
