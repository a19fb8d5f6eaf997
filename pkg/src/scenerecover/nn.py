"""Small feed-forward networks with hand-written backprop.

Weights are stored as (out, in) matrices; inputs are row batches, so a layer
computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class NonFiniteLossError(FloatingPointError):
    pass


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a, grad):
    if name == "relu":
        return grad * (z > 0)
    if name == "sigmoid":
        return grad * a * (1.0 - a)
    return grad


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("one weight, bias and activation per layer")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValueError("incompatible consecutive layer widths")

    @classmethod
    def create(
        cls,
        widths: Sequence[int],
        activations: Sequence[str] | str = "relu",
        rng: np.random.Generator | None = None,
        scale: float = 1.0,
        out_activation: str = "identity",
    ) -> Mlp:
        """Xavier-uniform initialised network. A single activation name applies
        to hidden layers; the output layer gets ``out_activation``."""
        rng = rng or np.random.default_rng(0)
        n_layers = len(widths) - 1
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + [out_activation]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths, widths[1:]):
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, list(activations))

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> Mlp:
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def forward(self, x: np.ndarray, keep: bool = False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        a = x[None, :] if single else x
        cache = [a]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w.T + b
            a = _act(act, z)
            cache += [z, a]
        if keep:
            return (a[0] if single else a), cache
        return a[0] if single else a

    __call__ = forward

    def backward(self, cache: list, grad_out: np.ndarray):
        """Reverse pass. Returns (param grads in ``params()`` order, input grad)."""
        grad = np.asarray(grad_out, dtype=float)
        if grad.ndim == 1:
            grad = grad[None, :]
        grads: list[np.ndarray] = []
        for layer in reversed(range(len(self.weights))):
            a_in, z, a = cache[2 * layer], cache[2 * layer + 1], cache[2 * layer + 2]
            dz = _act_grad(self.activations[layer], z, a, grad)
            grads = [dz.T @ a_in, dz.sum(axis=0)] + grads
            grad = dz @ self.weights[layer]
        return grads, grad

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": list(self.activations),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Mlp:
        widths = d["widths"]
        weights = [
            np.asarray(w, dtype=float).reshape(out, inp)
            for w, inp, out in zip(d["weights"], widths, widths[1:])
        ]
        return cls(weights, [np.asarray(b, dtype=float) for b in d["biases"]], list(d["activations"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Mlp:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, cache, loss_grad):
    return net.backward(cache, loss_grad)


# --- losses ---------------------------------------------------------------


def mse_loss(pred, target, weights=None):
    """Mean over rows of the (optionally per-dimension weighted) squared error
    averaged over dimensions."""
    diff = pred - target
    w = 1.0 if weights is None else weights
    loss = float(np.sum(w * diff**2) / diff.size)
    return loss, 2.0 * w * diff / diff.size


def bce_loss(prob, target, eps=1e-12):
    p = np.clip(prob, eps, 1.0 - eps)
    loss = float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))
    grad = (p - target) / (p * (1.0 - p)) / prob.size
    return loss, grad


LOSSES = {"mse": mse_loss, "bce": bce_loss}


# --- optimisation ---------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    init_scale: float = 1.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class Sgd:
    lr: float

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)
    _t: int = 0

    def step(self, params, grads):
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        c1 = 1 - self.beta1**self._t
        c2 = 1 - self.beta2**self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.lr)
    if cfg.optimizer == "adam":
        return Adam(cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def check_finite(loss: float, epoch: int, what: str = "loss") -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"{what} became {loss} at epoch {epoch}")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net: Mlp, X, Y, loss: str = "mse", cfg: TrainConfig = TrainConfig()):
    """Minibatch training of a single network on (X, Y); returns a trained
    copy and the per-epoch mean loss."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if Y.ndim == 1:
        Y = Y[:, None]
    net = net.copy()
    loss_fn = LOSSES[loss]
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(X), cfg.batch_size, rng):
            out, cache = net.forward(X[idx], keep=True)
            value, grad = loss_fn(out, Y[idx])
            check_finite(value, epoch)
            grads, _ = net.backward(cache, grad)
            opt.step(net.params(), grads)
            total += value * len(idx)
        curve.append(total / len(X))
    return net, curve


# --- gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    errors: list[float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def check_gradients(
    loss_and_grads: Callable[[], tuple[float, list[np.ndarray]]],
    params: list[np.ndarray],
    n_coords: int = 20,
    eps: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on random
    coordinates. ``loss_and_grads`` must read the (mutated in place) ``params``."""
    rng = rng or np.random.default_rng(0)
    _, grads = loss_and_grads()
    grads = [g.copy() for g in grads]
    sizes = np.array([p.size for p in params])
    errors = []
    for _ in range(n_coords):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[k].reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + eps
        up, _ = loss_and_grads()
        flat[j] = orig - eps
        down, _ = loss_and_grads()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[k].reshape(-1)[j]
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-7))
    return GradCheckReport(max(errors), n_coords, errors)
