"""A small fully-connected softmax classifier with feature taps and input gradients.

The net stands in for the deep models used for feature extraction: every
hidden layer (post-activation) is a tap, the last hidden layer is the
penultimate feature, and the output layer is the softmax head ``(W, b)``.

Input gradients are computed by hand-written reverse mode through the
affine/ReLU stack, seeded by an :class:`Objective` that knows the gradient
of a per-sample scalar with respect to a tap, the logits or the input.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import DimMismatch, MissingLabels, ShapeMismatch, UnsupportedComposition
from .linalg import SpdFactor, solve_spd, whiten


@dataclass
class RefNet:
    """Affine layers ``W_l`` of shape ``(out, in)`` with ReLU between them.

    ``activation="linear"`` drops the ReLU, which is only useful for
    closed-form checks.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.layer_sizes) < 2 or len(self.weights) != len(self.layer_sizes) - 1:
            raise ShapeMismatch("need one weight matrix per consecutive pair of layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != want or b.shape != (want[0],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape}, bias {b.shape}, expected {want}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, layer_sizes, seed: int = 7, activation: str = "relu") -> "RefNet":
        """He-initialised weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_sizes), weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_taps(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def tap_dims(self) -> list[int]:
        return self.layer_sizes[1:-1]

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        """Softmax head weights ``(C, h_L)`` and biases ``(C,)``."""
        return self.weights[-1], self.biases[-1]

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.activation == "relu" else z

    def forward(self, x) -> "_Cache":
        x = np.asarray(x, dtype=np.float64)
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.input_dim:
            raise DimMismatch(f"input has dimension {x2.shape[1]}, net expects {self.input_dim}")
        pre, acts = [], []
        h = x2
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w.T + b
            h = self._act(z)
            pre.append(z)
            acts.append(h)
        logits = h @ self.weights[-1].T + self.biases[-1]
        return _Cache(x2, pre, acts, logits)

    def taps(self, x, layer: int | None = None):
        """Hidden activations for a batch: all taps as a list, or just ``layer``."""
        acts = self.forward(x).acts
        return acts if layer is None else acts[layer]

    def logits(self, x) -> np.ndarray:
        return self.forward(x).logits

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.forward(x).logits, axis=1)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x).logits, axis=1)


@dataclass
class _Cache:
    x: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    logits: np.ndarray


@dataclass(frozen=True)
class FeatureTap:
    layer_index: int
    vector: np.ndarray
    pooled: bool = False


def forward_with_taps(net: RefNet, x) -> tuple[np.ndarray, np.ndarray, list[FeatureTap]]:
    """Logits, softmax probabilities and one :class:`FeatureTap` per hidden layer for one input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimMismatch("forward_with_taps takes a single input vector")
    cache = net.forward(x)
    logits = cache.logits[0]
    taps = [FeatureTap(i, a[0]) for i, a in enumerate(cache.acts)]
    return logits, softmax(logits), taps


# ---------------------------------------------------------------------------
# Objectives: per-sample scalars whose input gradient we can back-propagate.


class Objective:
    """A per-sample scalar of the net's taps / logits / input.

    ``evaluate`` returns the values ``(n,)`` and a mapping from location to
    the gradient seed at that location: ``"input"``, ``"logits"`` or an
    integer tap index.
    """

    def evaluate(self, cache: _Cache) -> tuple[np.ndarray, dict]:
        raise NotImplementedError


def _per_row(v, n: int, dim: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    v = np.broadcast_to(v, (n, dim)) if v.ndim == 1 else v
    if v.shape != (n, dim):
        raise DimMismatch(f"{name} has shape {v.shape}, expected ({n}, {dim})")
    return v


def _per_row_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    labels = np.broadcast_to(labels, (n,)) if labels.ndim == 0 else labels
    if labels.shape != (n,):
        raise DimMismatch(f"{labels.shape[0]} labels for {n} inputs")
    return labels


@dataclass(frozen=True)
class CrossEntropy(Objective):
    """``-log softmax(logits)[label]``."""

    labels: np.ndarray

    def evaluate(self, cache):
        n, C = cache.logits.shape
        y = _per_row_labels(self.labels, n)
        if y.size and (y.min() < 0 or y.max() >= C):
            raise MissingLabels(f"labels must lie in [0, {C})")
        logp = log_softmax(cache.logits, axis=1)
        g = np.exp(logp)
        g[np.arange(n), y] -= 1.0
        return -logp[np.arange(n), y], {"logits": g}


@dataclass(frozen=True)
class LogSoftmax(Objective):
    """``log softmax(logits / T)[label]``."""

    labels: np.ndarray
    temperature: float = 1.0

    def evaluate(self, cache):
        n = cache.logits.shape[0]
        y = _per_row_labels(self.labels, n)
        logp = log_softmax(cache.logits / self.temperature, axis=1)
        g = -np.exp(logp)
        g[np.arange(n), y] += 1.0
        return logp[np.arange(n), y], {"logits": g / self.temperature}


@dataclass(frozen=True)
class MahalanobisTo(Objective):
    """``(f_l - mu)^T S^-1 (f_l - mu)`` at tap ``layer`` (``mu`` per row or shared)."""

    layer: int
    factor: SpdFactor
    mu: np.ndarray

    def evaluate(self, cache):
        if not -len(cache.acts) <= self.layer < len(cache.acts):
            raise UnsupportedComposition(f"no tap {self.layer}")
        f = cache.acts[self.layer]
        diff = f - _per_row(self.mu, f.shape[0], f.shape[1], "mu")
        z = whiten(self.factor, diff)
        return np.einsum("ij,ij->i", z, z), {self.layer % len(cache.acts): 2.0 * solve_spd(self.factor, diff)}


@dataclass(frozen=True)
class HalfSquaredNorm(Objective):
    """``||v||^2 / 2`` of the input (``layer=None``), a tap, or the logits (``layer="logits"``)."""

    layer: int | str | None = None

    def evaluate(self, cache):
        if self.layer is None:
            v, key = cache.x, "input"
        elif self.layer == "logits":
            v, key = cache.logits, "logits"
        else:
            v, key = cache.acts[self.layer], self.layer % len(cache.acts)
        return 0.5 * np.einsum("ij,ij->i", v, v), {key: v.copy()}


@dataclass(frozen=True)
class Sum(Objective):
    """Weighted sum of objectives."""

    terms: tuple
    weights: tuple | None = None

    def evaluate(self, cache):
        weights = self.weights or (1.0,) * len(self.terms)
        total, seeds = 0.0, {}
        for w, term in zip(weights, self.terms):
            if not isinstance(term, Objective):
                raise UnsupportedComposition(f"{type(term).__name__} is not an Objective")
            val, grads = term.evaluate(cache)
            total = total + w * val
            for key, g in grads.items():
                seeds[key] = seeds.get(key, 0.0) + w * g
        return total, seeds


def value_and_input_gradient(net: RefNet, x, objective: Objective) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective values and exact gradients with respect to the input rows."""
    if not isinstance(objective, Objective):
        raise UnsupportedComposition(f"{type(objective).__name__} is not an Objective")
    cache = net.forward(x)
    values, seeds = objective.evaluate(cache)
    unknown = set(seeds) - {"input", "logits"} - set(range(len(cache.acts)))
    if unknown:
        raise UnsupportedComposition(f"unsupported gradient locations {sorted(map(str, unknown))}")
    n = cache.x.shape[0]
    g_h = seeds["logits"] @ net.weights[-1] if "logits" in seeds else np.zeros_like(cache.acts[-1] if cache.acts else cache.x)
    for layer in range(len(cache.acts) - 1, -1, -1):
        if layer in seeds:
            g_h = g_h + seeds[layer]
        g_z = g_h * (cache.pre[layer] > 0) if net.activation == "relu" else g_h
        g_h = g_z @ net.weights[layer]
    if not cache.acts and "logits" not in seeds:
        g_h = np.zeros((n, net.input_dim))
    if "input" in seeds:
        g_h = g_h + seeds["input"]
    return np.asarray(values, dtype=np.float64), g_h


def input_gradient(net: RefNet, x, objective: Objective) -> np.ndarray:
    """Gradient of ``objective`` with respect to ``x`` (a vector or a batch of rows).

    The ReLU subgradient at exactly zero is taken as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    _, g = value_and_input_gradient(net, x, objective)
    return g[0] if x.ndim == 1 else g


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 7

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.momentum < 0:
            raise ValueError(f"invalid training config {self}")


def cross_entropy(net: RefNet, x, labels) -> float:
    values, _ = CrossEntropy(np.asarray(labels)).evaluate(net.forward(x))
    return float(values.mean())


def _param_grads(net: RefNet, x: np.ndarray, y: np.ndarray):
    cache = net.forward(x)
    n = x.shape[0]
    g = softmax(cache.logits, axis=1)
    g[np.arange(n), y] -= 1.0
    g /= n
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    inputs = [cache.x] + cache.acts
    for layer in range(len(net.weights) - 1, -1, -1):
        gw[layer] = g.T @ inputs[layer]
        gb[layer] = g.sum(axis=0)
        if layer:
            g = g @ net.weights[layer]
            if net.activation == "relu":
                g = g * (cache.pre[layer - 1] > 0)
    return gw, gb


def train(net: RefNet, data, cfg: TrainConfig = TrainConfig()) -> RefNet:
    """Mini-batch SGD with Nesterov momentum on the cross-entropy loss.

    Returns a trained copy; ``net`` is left untouched. Deterministic given
    ``cfg.seed``.
    """
    if data.labels is None:
        raise MissingLabels("training requires labelled data")
    x, y = data.values, data.labels
    if y.size and y.max() >= net.num_classes:
        raise MissingLabels(f"label {y.max()} out of range for {net.num_classes} classes")
    out = copy.deepcopy(net)
    rng = np.random.default_rng(cfg.seed)
    vel_w = [np.zeros_like(w) for w in out.weights]
    vel_b = [np.zeros_like(b) for b in out.biases]
    mu, lr = cfg.momentum, cfg.learning_rate
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gw, gb = _param_grads(out, x[idx], y[idx])
            for i in range(len(out.weights)):
                vel_w[i] = mu * vel_w[i] + gw[i]
                vel_b[i] = mu * vel_b[i] + gb[i]
                out.weights[i] -= lr * (gw[i] + mu * vel_w[i])
                out.biases[i] -= lr * (gb[i] + mu * vel_b[i])
    return out


def average_pool(feature_map, shape) -> np.ndarray:
    """Per-channel spatial mean of a flattened ``F x H x W`` map (or a batch of them)."""
    F, H, W = (int(s) for s in shape)
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.shape[-1] != F * H * W:
        raise ShapeMismatch(f"data length {fm.shape[-1]} does not match shape {(F, H, W)}")
    return fm.reshape(fm.shape[:-1] + (F, H * W)).mean(axis=-1)


def to_dict(net: RefNet) -> dict:
    return {
        "version": 1,
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def from_dict(doc: dict) -> RefNet:
    return RefNet(
        doc["layer_sizes"],
        [np.asarray(w, dtype=np.float64) for w in doc["weights"]],
        [np.asarray(b, dtype=np.float64) for b in doc["biases"]],
        doc.get("activation", "relu"),
    )
