"""Small numpy feed-forward nets trained with softmax cross-entropy and SGD.

Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` of shape
``(n, fan_in)`` maps to ``X @ W + b``. Hidden layers use ReLU; the output
layer of a classifier is linear followed by softmax. A :class:`Trunk` is the
hidden stack alone and emits the penultimate feature vector.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class Scorer(Protocol):
    """Anything mapping a feature batch to row-stochastic class probabilities."""

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


# ---------------------------------------------------------------------------
# layer stacks


def stack_forward(weights, biases, X, relu_last: bool) -> list[np.ndarray]:
    """Return the activations ``[X, a1, ..., aL]`` of a dense stack."""
    acts = [X]
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ W + b
        if i < last or relu_last:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def stack_backward(weights, acts, dout, relu_last: bool):
    """Backprop ``dout`` (gradient w.r.t. ``acts[-1]``) through the stack.

    Returns ``(grad_W, grad_b, grad_input)``.
    """
    L = len(weights)
    gW, gb = [None] * L, [None] * L
    delta = dout
    for i in range(L - 1, -1, -1):
        if i < L - 1 or relu_last:
            delta = delta * (acts[i + 1] > 0)
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ weights[i].T
    return gW, gb, delta


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean ``-sum y log p`` and its gradient w.r.t. the logits.

    ``targets`` is either integer labels ``(n,)`` or distributions ``(n, C)``.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    Y = one_hot(targets, logits.shape[1]) if targets.ndim == 1 else targets
    loss = -float((Y * logp).sum()) / n
    return loss, (np.exp(logp) - Y) / n


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    Y = np.zeros((len(labels), n_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


# ---------------------------------------------------------------------------
# models


@dataclass
class Trunk:
    """Hidden layers of a classifier; every layer is ReLU-activated."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def features(self, X: np.ndarray) -> np.ndarray:
        return stack_forward(self.weights, self.biases, X, relu_last=True)[-1]

    def params(self) -> list[np.ndarray]:
        return _interleave(self.weights, self.biases)

    def copy(self) -> "Trunk":
        return copy.deepcopy(self)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match W {W.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(
                    f"layer {i}: fan_in {W.shape[0]} != previous fan_out {self.weights[i - 1].shape[1]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    def trunk(self) -> Trunk:
        """The hidden stack with the classification layer discarded."""
        if len(self.weights) < 2:
            raise ValueError("a single-layer model has no trunk")
        return Trunk([W.copy() for W in self.weights[:-1]], [b.copy() for b in self.biases[:-1]])

    def params(self) -> list[np.ndarray]:
        return _interleave(self.weights, self.biases)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)[1]


def _interleave(weights, biases):
    out = []
    for W, b in zip(weights, biases):
        out += [W, b]
    return out


def init_mlp(sizes: Sequence[int], seed: int = 0) -> MlpModel:
    """He-scaled normal weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(size=(a, b)) * np.sqrt(2.0 / a) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MlpModel(weights, biases)


def zeros_mlp(sizes: Sequence[int]) -> MlpModel:
    return MlpModel(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def _check_input(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise ValueError(f"feature dimension mismatch: model expects {model.input_dim}, got {X.shape[1]}")
    return X


def forward(model: MlpModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Penultimate features and softmax probabilities for a batch (or one row)."""
    X = _check_input(model, X)
    acts = stack_forward(model.weights, model.biases, X, relu_last=False)
    return acts[-2], softmax(acts[-1])


def loss_and_grads(model: MlpModel, X: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and gradients ordered like ``model.params()``."""
    X = _check_input(model, X)
    acts = stack_forward(model.weights, model.biases, X, relu_last=False)
    loss, dlogits = cross_entropy(acts[-1], np.asarray(targets))
    gW, gb, _ = stack_backward(model.weights, acts, dlogits, relu_last=False)
    return loss, _interleave(gW, gb)


# ---------------------------------------------------------------------------
# training


def sgd_fit(
    params: list[np.ndarray],
    loss_grad: Callable[[np.ndarray], tuple[float, list[np.ndarray]]],
    n_samples: int,
    config: TrainConfig,
    decay_mask: Sequence[bool] | None = None,
) -> list[float]:
    """Minibatch SGD with heavy-ball momentum, updating ``params`` in place.

    ``loss_grad(batch_indices)`` returns the batch loss and gradients aligned
    with ``params``. Returns the per-epoch mean loss.
    """
    config.validate()
    if n_samples < 1:
        raise ValueError("cannot train on an empty dataset")
    if decay_mask is None:
        decay_mask = [p.ndim == 2 for p in params]
    rng = np.random.default_rng(config.seed)
    velocity = [np.zeros_like(p) for p in params]
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_grad(idx)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(idx)
            for p, g, v, decay in zip(params, grads, velocity, decay_mask):
                if decay and config.weight_decay:
                    g = g + config.weight_decay * p
                v *= config.momentum
                v -= config.learning_rate * g
                p += v
        epoch_loss = total / n_samples
        if not np.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergedError(epoch, epoch_loss)
        trace.append(epoch_loss)
    return trace


def train(model: MlpModel, X: np.ndarray, y: np.ndarray, config: TrainConfig):
    """Train a copy of ``model``; returns ``(trained_model, loss_trace)``."""
    model = model.copy()
    X = _check_input(model, X)
    y = np.asarray(y)
    if y.ndim == 1 and len(y) and (y.min() < 0 or y.max() >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    params = model.params()

    def loss_grad(idx):
        return loss_and_grads(model, X[idx], y[idx])

    trace = sgd_fit(params, loss_grad, len(X), config)
    return model, trace


def train_classifier(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    hidden: Sequence[int],
    config: TrainConfig,
):
    """Initialise from ``config.seed`` and train; returns ``(model, trace)``."""
    model = init_mlp([X.shape[1], *hidden, n_classes], seed=config.seed)
    return train(model, X, y, config)


def accuracy(model: Scorer, X: np.ndarray, y: np.ndarray) -> float:
    return float((model.predict_proba(X).argmax(axis=1) == y).mean())


def grad_check(model: MlpModel, sample, epsilon: float = 1e-5) -> float:
    """Max relative gap between backprop and central-difference gradients.

    ``sample`` is ``(x, target)`` with ``target`` a label or a distribution.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x, target = sample
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    T = np.asarray([target]) if np.ndim(target) == 0 else np.asarray(target, dtype=np.float64).reshape(1, -1)
    model = model.copy()
    _, analytic = loss_and_grads(model, X, T)
    worst = 0.0
    for p, g in zip(model.params(), analytic):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_and_grads(model, X, T)
            flat[i] = orig - epsilon
            down, _ = loss_and_grads(model, X, T)
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "gcsmoe-mlp"
_VERSION = 1


def _dump_layers(kind: str, weights, biases) -> str:
    sizes = [weights[0].shape[0]] + [W.shape[1] for W in weights]
    lines = [f"{_MAGIC} {_VERSION} {kind}", "sizes " + " ".join(map(str, sizes))]
    for W, b in zip(weights, biases):
        for row in W:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def dumps_model(model: MlpModel | Trunk) -> str:
    kind = "trunk" if isinstance(model, Trunk) else "classifier"
    return _dump_layers(kind, model.weights, model.biases)


def loads_model(text: str) -> MlpModel | Trunk:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != _MAGIC:
        raise ValueError("not a model checkpoint (bad magic line)")
    if int(head[1]) != _VERSION:
        raise ValueError(f"unsupported checkpoint version {head[1]}")
    kind = head[2]
    if not lines[1].startswith("sizes "):
        raise ValueError("line 2: expected 'sizes ...'")
    sizes = [int(t) for t in lines[1].split()[1:]]
    pos = 2
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        if pos + a >= len(lines):
            raise ValueError(f"checkpoint truncated: layer {len(weights)} needs lines {pos + 1}..{pos + a + 1}")
        try:
            rows = [[float(t) for t in lines[pos + r].split()] for r in range(a)]
            W = np.array(rows, dtype=np.float64).reshape(a, b)
            bias = np.array([float(t) for t in lines[pos + a].split()], dtype=np.float64).reshape(b)
        except ValueError as exc:
            raise ValueError(f"layer {len(weights)} (lines {pos + 1}..{pos + a + 1}): {exc}") from None
        pos += a + 1
        weights.append(W)
        biases.append(bias)
    if kind == "trunk":
        return Trunk(weights, biases)
    if kind == "classifier":
        return MlpModel(weights, biases)
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model: MlpModel | Trunk, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MlpModel | Trunk:
    return loads_model(Path(path).read_text())
