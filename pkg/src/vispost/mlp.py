"""Multilayer-perceptron classifier over the visibility classes.

Two logistic hidden layers feed a softmax output layer; training minimizes the
mean cross-entropy by plain full-batch gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from .scale import N_CLASSES

FORMAT = "vispost.mlp"
VERSION = 1


class MlpDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 8
    hidden: tuple[int, ...] = (25, 25)
    output_dim: int = N_CLASSES
    hidden_activation: str = "logistic"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("layer sizes must be positive")
        if self.hidden_activation != "logistic":
            raise ValueError("only the logistic hidden activation is supported")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass(frozen=True)
class MlpTrainConfig:
    max_epochs: int = 200
    learning_rate: float = 0.2
    seed: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass(eq=False)
class MlpParams:
    arch: MlpArchitecture
    weights: list[np.ndarray]  # weights[i] has shape (fan_in, fan_out)
    biases: list[np.ndarray]
    loss_trace: list[float] = field(default_factory=list)
    feature_config: dict | None = None

    def __post_init__(self):
        sizes = self.arch.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("number of layers does not match the architecture")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {W.shape}, {b.shape}")

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "MlpParams":
        s = arch.layer_sizes
        return cls(
            arch,
            [np.zeros((s[i], s[i + 1])) for i in range(len(s) - 1)],
            [np.zeros(s[i + 1]) for i in range(len(s) - 1)],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        weights, biases, pos = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(theta[pos : pos + W.size].reshape(W.shape))
            pos += W.size
            biases.append(theta[pos : pos + b.size].copy())
            pos += b.size
        return MlpParams(self.arch, weights, biases, feature_config=self.feature_config)

    def to_dict(self) -> dict:
        a = self.arch
        return {
            "format": FORMAT,
            "version": VERSION,
            "architecture": {
                "input_dim": a.input_dim,
                "hidden": list(a.hidden),
                "output_dim": a.output_dim,
                "hidden_activation": a.hidden_activation,
            },
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "loss_trace": list(self.loss_trace),
            "feature_config": self.feature_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not a {FORMAT} v{VERSION} document")
        arch = MlpArchitecture(**d["architecture"])
        return cls(
            arch,
            [np.array(W, float).reshape(arch.layer_sizes[i], arch.layer_sizes[i + 1]) for i, W in enumerate(d["weights"])],
            [np.array(b, float) for b in d["biases"]],
            list(d.get("loss_trace", [])),
            d.get("feature_config"),
        )


def _forward(params: MlpParams, X):
    acts = [X]
    h = X
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = expit(h @ W + b)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return acts, log_softmax(logits, axis=-1)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Class probabilities for one feature vector or a batch of them."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.arch.input_dim:
        raise ValueError(f"input dimension {x.shape[-1]} != {params.arch.input_dim}")
    single = x.ndim == 1
    _, logp = _forward(params, np.atleast_2d(x))
    p = np.exp(logp)
    p /= p.sum(axis=-1, keepdims=True)
    return p[0] if single else p


def _check_batch(params, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ValueError("expected a non-empty batch X (n, d) with labels y (n,)")
    if X.shape[1] != params.arch.input_dim:
        raise ValueError(f"input dimension {X.shape[1]} != {params.arch.input_dim}")
    if y.min() < 1 or y.max() > params.arch.output_dim:
        raise ValueError("class label out of range")
    return X, y - 1


def mlp_loss_grad(params: MlpParams, X, y) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean cross-entropy of 1-based labels and backpropagated gradients.

    Returns ``(loss, weight_grads, bias_grads)`` aligned with ``params``.
    """
    X, y0 = _check_batch(params, X, y)
    return _loss_grad(params, X, y0)


def _loss_grad(params, X, y0):
    n = X.shape[0]
    acts, logp = _forward(params, X)
    rows = np.arange(n)
    loss = -logp[rows, y0].mean()
    delta = np.exp(logp)
    delta[rows, y0] -= 1.0
    delta /= n
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            h = acts[i]
            delta = (delta @ params.weights[i].T) * h * (1.0 - h)
    return float(loss), gW, gb


def init_params(arch: MlpArchitecture, seed: int, init_scale: float = 0.5) -> MlpParams:
    rng = np.random.default_rng(seed)
    s = arch.layer_sizes
    weights, biases = [], []
    for i in range(len(s) - 1):
        weights.append(rng.uniform(-init_scale, init_scale, (s[i], s[i + 1])))
        biases.append(rng.uniform(-init_scale, init_scale, s[i + 1]))
    return MlpParams(arch, weights, biases)


def train_mlp(X, y, arch: MlpArchitecture, cfg: MlpTrainConfig = MlpTrainConfig(), feature_config=None) -> MlpParams:
    """Full-batch gradient descent for ``cfg.max_epochs`` epochs.

    The returned params carry ``loss_trace``: the training loss before each
    epoch's update, followed by the final loss.
    """
    params = init_params(arch, cfg.seed, cfg.init_scale)
    X, y0 = _check_batch(params, X, y)
    trace = []
    for epoch in range(cfg.max_epochs):
        loss, gW, gb = _loss_grad(params, X, y0)
        if not np.isfinite(loss):
            raise MlpDivergenceError(f"training loss became non-finite at epoch {epoch}")
        trace.append(loss)
        for i in range(len(gW)):
            params.weights[i] -= cfg.learning_rate * gW[i]
            params.biases[i] -= cfg.learning_rate * gb[i]
    loss, _, _ = _loss_grad(params, X, y0)
    if not np.isfinite(loss):
        raise MlpDivergenceError(f"training loss became non-finite at epoch {cfg.max_epochs}")
    trace.append(loss)
    params.loss_trace = trace
    params.feature_config = feature_config
    return params
