"""Comparison scores: max-softmax, ODIN, Euclidean, kernel density and LID."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import (
    DegenerateEstimate,
    DimMismatch,
    DuplicatePointWarning,
    EmptyReference,
    TooFewNeighbors,
)
from .gda import GaussianModel
from .metrics import auroc
from .preprocess import NOISE_GRID
from .refnet import LogSoftmax, RefNet, input_gradient

TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)
BANDWIDTHS = (0.1, 0.25, 0.5, 0.75, 1.0)
LID_NEIGHBOURS = tuple(range(10, 100, 10))


@dataclass(frozen=True)
class OdinConfig:
    temperature: float = 1000.0
    eps: float = 0.0
    eps_grid: tuple[float, ...] = NOISE_GRID
    temperatures: tuple[float, ...] = TEMPERATURES

    def __post_init__(self):
        if self.temperature < 1:
            raise ValueError(f"temperature must be >= 1, got {self.temperature}")


def _max_prob(logits: np.ndarray) -> np.ndarray:
    return softmax(logits, axis=-1).max(axis=-1)


def max_softmax(net: RefNet, x) -> np.ndarray | float:
    """``max_y P(y|x)``."""
    x = np.asarray(x, dtype=np.float64)
    out = _max_prob(net.logits(x))
    return float(out[0]) if x.ndim == 1 else out


def odin_score(net: RefNet, x, cfg: OdinConfig = OdinConfig()) -> np.ndarray | float:
    """Temperature-scaled max softmax after a step that raises ``log P(y_hat | x; T)``."""
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    T = cfg.temperature
    if cfg.eps != 0:
        y_hat = net.predict(rows)
        grad = input_gradient(net, rows, LogSoftmax(y_hat, T))
        rows = rows - cfg.eps * np.sign(-grad)
    logits = net.logits(rows)
    out = _max_prob(logits if T == 1 else logits / T)
    return float(out[0]) if x.ndim == 1 else out


def select_odin(net: RefNet, pos_x, neg_x, base: OdinConfig = OdinConfig()) -> tuple[OdinConfig, float]:
    """Grid-search ``(T, eps)`` for the best validation AUROC (first best wins)."""
    best, best_auc = None, -1.0
    for T in base.temperatures:
        for eps in base.eps_grid:
            cfg = OdinConfig(T, eps, base.eps_grid, base.temperatures)
            s = np.r_[odin_score(net, pos_x, cfg), odin_score(net, neg_x, cfg)]
            lab = np.r_[np.ones(len(pos_x), bool), np.zeros(len(neg_x), bool)]
            auc = auroc(s, lab)
            if auc > best_auc:
                best, best_auc = cfg, auc
    return best, best_auc


def euclidean_score(model: GaussianModel, x) -> np.ndarray | float:
    """``max_c -||x - mu_c||^2`` using the class means only."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimMismatch(f"input has dimension {x.shape[-1]}, model expects {model.dim}")
    rows = np.atleast_2d(x)
    d = ((rows[:, None, :] - model.means[None, :, :]) ** 2).sum(axis=2)
    out = -d.min(axis=1)
    return float(out[0]) if x.ndim == 1 else out


def euclidean_distances(model: GaussianModel, x) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return ((rows[:, None, :] - model.means[None, :, :]) ** 2).sum(axis=2)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kd_score(reference, x, sigma: float) -> np.ndarray | float:
    """Mean Gaussian kernel ``exp(-||x_i - x||^2 / sigma^2)`` over a reference set.

    ``reference`` is the training features of the predicted class.
    """
    if sigma <= 0:
        raise ValueError(f"bandwidth must be > 0, got {sigma}")
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if ref.shape[0] == 0 or ref.size == 0:
        raise EmptyReference("kernel density needs a non-empty reference set")
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    if rows.shape[1] != ref.shape[1]:
        raise DimMismatch(f"input has dimension {rows.shape[1]}, reference {ref.shape[1]}")
    diff = rows[:, None, :] - ref[None, :, :]
    out = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / sigma**2).mean(axis=1)
    return float(out[0]) if x.ndim == 1 else out


def kd_scores_by_class(class_refs: dict[int, np.ndarray], x, predicted, sigma: float) -> np.ndarray:
    """KD score of each row against the reference set of its predicted class."""
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    predicted = np.asarray(predicted)
    out = np.empty(rows.shape[0])
    for c in np.unique(predicted):
        sel = predicted == c
        if c not in class_refs:
            raise EmptyReference(f"no reference samples for class {c}")
        out[sel] = kd_score(class_refs[c], rows[sel], sigma)
    return out


@dataclass(frozen=True)
class LidConfig:
    k: int = 20
    variant: str = "reciprocal"

    def __post_init__(self):
        if self.variant not in ("reciprocal", "as_printed"):
            raise ValueError(f"unknown LID variant {self.variant!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def lid_score(x, batch, cfg: LidConfig = LidConfig()) -> np.ndarray | float:
    """LID estimate from the ``k`` nearest neighbours of ``x`` in ``batch``.

    ``"as_printed"`` returns ``-(1/k) sum log(r_i / r_k)``; ``"reciprocal"``
    (the maximum-likelihood estimator) returns ``-1 / ((1/k) sum log(r_i / r_k))``.
    Zero distances (the point itself, or duplicates) are dropped.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    if rows.shape[1] != batch.shape[1]:
        raise DimMismatch(f"input has dimension {rows.shape[1]}, batch {batch.shape[1]}")
    dist = np.sqrt(_sq_dists(rows, batch))
    out = np.empty(rows.shape[0])
    for i, d in enumerate(dist):
        zero = d <= 1e-12 * max(1.0, float(d.max(initial=0.0)))
        if zero.sum() > 1:
            warnings.warn(f"{int(zero.sum()) - 1} duplicate point(s) dropped from LID batch",
                          DuplicatePointWarning, stacklevel=2)
        d = d[~zero]
        if d.size < cfg.k:
            raise TooFewNeighbors(f"only {d.size} non-zero neighbours for k={cfg.k}")
        r = np.partition(d, cfg.k - 1)[:cfg.k]
        m = float(np.mean(np.log(r / r.max())))
        if cfg.variant == "as_printed":
            out[i] = -m
        elif m == 0.0:
            raise DegenerateEstimate("all k neighbours are equidistant; LID is unbounded")
        else:
            out[i] = -1.0 / m
    return float(out[0]) if x.ndim == 1 else out


def lid_minibatch_scores(features, reference, cfg: LidConfig = LidConfig(), batch_size: int = 100,
                         seed: int = 7) -> np.ndarray:
    """LID of each row against a random in-distribution minibatch of ``batch_size`` points."""
    rng = np.random.default_rng(seed)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    out = np.empty(features.shape[0])
    for start in range(0, features.shape[0], batch_size):
        idx = rng.choice(reference.shape[0], size=min(batch_size, reference.shape[0]), replace=False)
        out[start:start + batch_size] = lid_score(features[start:start + batch_size], reference[idx], cfg)
    return out
