"""Feature ensemble: per-tap Mahalanobis scores combined by logistic regression.

The combiner is fit on validation scores (in-distribution = positive) with
full-batch gradient descent on standardised features. The L2 penalty is
picked by inner cross-validation, and nested cross-validation supplies an
honest validation AUROC, which is also what the noise magnitude is tuned on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import gda
from .errors import DimMismatch, EmptySet, SingleClass
from .gda import GaussianModel, confidence_score
from .metrics import auroc
from .preprocess import NOISE_GRID, perturb
from .refnet import RefNet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CvConfig:
    outer_folds: int = 5
    inner_folds: int = 5
    l2_grid: tuple[float, ...] = (1e-4, 1e-2, 1.0)
    iterations: int = 2000
    step: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ValueError("fold counts must be >= 2")
        if not self.l2_grid:
            raise ValueError("l2_grid must be non-empty")


@dataclass
class EnsembleDetector:
    """Weights ``alphas`` and ``intercept`` over the per-tap scores at noise ``eps``."""

    alphas: np.ndarray
    intercept: float = 0.0
    eps: float = 0.0
    layers: list[int] | None = None
    layer_models: list[GaussianModel] | None = None
    l2: float | None = None
    cv_auroc: float | None = None
    eps_aurocs: dict[float, float] = field(default_factory=dict)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.alphas)) or not np.isfinite(self.intercept):
            raise ValueError("detector weights must be finite")
        if self.layers is None:
            self.layers = list(range(self.alphas.size))

    def score(self, net: RefNet, x) -> np.ndarray:
        if self.layer_models is None:
            raise ValueError("detector carries no layer models")
        return combine(self, layer_scores(net, self.layer_models, x, self.eps, self.layers))

    def to_dict(self) -> dict:
        doc = {
            "version": 1,
            "alphas": self.alphas.tolist(),
            "intercept": float(self.intercept),
            "eps": float(self.eps),
            "layers": list(self.layers),
            "layer_dims": [m.dim for m in self.layer_models] if self.layer_models else None,
            "l2": self.l2,
            "cv_auroc": self.cv_auroc,
        }
        if self.layer_models:
            doc["layer_models"] = [gda.to_dict(m) for m in self.layer_models]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleDetector":
        models = doc.get("layer_models")
        return cls(
            alphas=np.asarray(doc["alphas"], dtype=np.float64),
            intercept=float(doc["intercept"]),
            eps=float(doc["eps"]),
            layers=doc.get("layers"),
            layer_models=[gda.from_dict(m) for m in models] if models else None,
            l2=doc.get("l2"),
            cv_auroc=doc.get("cv_auroc"),
        )


def fit_layer_models(net: RefNet, data, layers: Sequence[int] | None = None, **fit_kw) -> list[GaussianModel]:
    """One tied-covariance Gaussian per tap, fit on the net's features of ``data``."""
    layers = range(net.num_taps) if layers is None else layers
    acts = net.taps(data.values)
    return [gda.fit(gda.FeatureMatrix(acts[l], data.labels), **fit_kw) for l in layers]


def layer_scores(net: RefNet, layer_models: Sequence[GaussianModel], x, eps: float = 0.0,
                 layers: Sequence[int] | None = None, clip=None) -> np.ndarray:
    """Per-tap confidence scores ``(n, L)`` after per-tap input pre-processing.

    For each tap the input is perturbed towards that tap's closest class and
    the perturbed input is scored at the same tap.
    """
    layers = list(range(len(layer_models))) if layers is None else list(layers)
    if len(layers) != len(layer_models):
        raise DimMismatch(f"{len(layer_models)} layer models for {len(layers)} layers")
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    out = np.empty((rows.shape[0], len(layers)))
    if eps == 0:
        acts = net.taps(rows)
    for j, (layer, model) in enumerate(zip(layers, layer_models)):
        feats = acts[layer] if eps == 0 else net.taps(perturb(net, model, layer, rows, eps, clip), layer)
        out[:, j] = confidence_score(model, feats)
    return out[0] if x.ndim == 1 else out


def combine(det: EnsembleDetector, s) -> np.ndarray | float:
    """``sum_l alpha_l M_l + intercept``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != det.alphas.size:
        raise DimMismatch(f"{s.shape[-1]} layer scores for {det.alphas.size} weights")
    out = s @ det.alphas + det.intercept
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# logistic regression


def _fit_many(X: np.ndarray, y: np.ndarray, masks: np.ndarray, l2: np.ndarray,
              iterations: int, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Fit ``K`` penalised logistic regressions at once, one per row of ``masks``.

    Each model standardises with the mean/std of its own training rows and
    runs plain gradient descent on the mean log-loss plus ``l2/2 * ||w||^2``.
    Returns raw-scale weights ``(K, p)`` and intercepts ``(K,)``.
    """
    M = masks.astype(np.float64)
    counts = M.sum(axis=1)
    mean = (M @ X) / counts[:, None]
    var = (M @ X**2) / counts[:, None] - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    std[std < 1e-12] = 1.0
    K, p = mean.shape
    w = np.zeros((K, p))
    b = np.zeros(K)
    row_weight = np.ascontiguousarray((M / counts[:, None]).T)
    target = y[:, None]
    z = np.empty((X.shape[0], K))
    for _ in range(iterations):
        ws = w / std
        # z holds the logits, then the weighted residuals, in place
        np.matmul(X, ws.T, out=z)
        z += b - np.sum(mean * ws, axis=1)
        expit(z, out=z)
        z -= target
        z *= row_weight
        rsum = z.sum(axis=0)
        gw = (z.T @ X - mean * rsum[:, None]) / std + l2[:, None] * w
        w -= step * gw
        b -= step * rsum
    alpha = w / std
    return alpha, b - np.sum(mean * alpha, axis=1)


def _stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    fold = np.empty(y.size, dtype=np.int64)
    for label in (0, 1):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % k
    return fold


def _fold_auroc(scores: np.ndarray, y: np.ndarray) -> float:
    if y.all() or not y.any():
        return 0.5
    return auroc(scores, y.astype(bool))


@dataclass
class _Plan:
    """Book-keeping for batching every CV fit into one gradient-descent run."""

    masks: list = field(default_factory=list)
    l2: list = field(default_factory=list)

    def add(self, mask, l2) -> int:
        self.masks.append(mask)
        self.l2.append(l2)
        return len(self.masks) - 1


def _nested_fit(X, y, cfg: CvConfig, final: bool = True):
    n = y.size
    rng = np.random.default_rng(cfg.seed)
    outer = _stratified_folds(y, cfg.outer_folds, rng)
    plan = _Plan()
    everything = np.ones(n, dtype=bool)

    def inner_jobs(rows: np.ndarray):
        folds = np.full(n, -1)
        folds[rows] = _stratified_folds(y[rows], cfg.inner_folds, rng)
        jobs = []
        for f in range(cfg.inner_folds):
            train = rows & (folds != f)
            test = rows & (folds == f)
            jobs.append((test, [plan.add(train, l2) for l2 in cfg.l2_grid]))
        refit = [plan.add(rows, l2) for l2 in cfg.l2_grid]
        return jobs, refit

    outer_jobs = []
    for f in range(cfg.outer_folds):
        train = outer != f
        outer_jobs.append((outer == f, *inner_jobs(train)))
    if final:
        final_jobs, final_refit = inner_jobs(everything)

    alpha, icpt = _fit_many(X, y, np.array(plan.masks), np.array(plan.l2), cfg.iterations, cfg.step)

    def choose(jobs) -> int:
        means = [
            np.mean([_fold_auroc(X[test] @ alpha[ids[g]] + icpt[ids[g]], y[test]) for test, ids in jobs])
            for g in range(len(cfg.l2_grid))
        ]
        return int(np.argmax(means))

    fold_aurocs = []
    for test, jobs, refit in outer_jobs:
        g = choose(jobs)
        fold_aurocs.append(_fold_auroc(X[test] @ alpha[refit[g]] + icpt[refit[g]], y[test]))
    cv = float(np.mean(fold_aurocs))
    if not final:
        return None, None, None, cv
    g = choose(final_jobs)
    return alpha[final_refit[g]], float(icpt[final_refit[g]]), cfg.l2_grid[g], cv


def _design(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise EmptySet("both positive and negative score sets must be non-empty")
    if pos.shape[1] != neg.shape[1]:
        raise DimMismatch(f"positive scores have {pos.shape[1]} layers, negative {neg.shape[1]}")
    return np.vstack([pos, neg]), np.r_[np.ones(pos.shape[0]), np.zeros(neg.shape[0])]


def _check_fold_sizes(y: np.ndarray, cfg: CvConfig) -> None:
    smallest = int(min(y.sum(), (1 - y).sum()))
    # every inner fold of every outer training split needs one sample of each side
    needed = -(-cfg.inner_folds * cfg.outer_folds // (cfg.outer_folds - 1))
    if smallest < max(cfg.outer_folds, needed):
        raise SingleClass(
            f"{smallest} samples on the smaller side is too few for "
            f"{cfg.outer_folds}x{cfg.inner_folds} nested cross-validation"
        )


def train_weights(pos, neg, cfg: CvConfig = CvConfig()) -> EnsembleDetector:
    """Fit the layer weights by L2-penalised logistic regression (positives = in-distribution).

    The returned detector carries the nested-CV AUROC in ``cv_auroc``.

    Raises:
        EmptySet: ``pos`` or ``neg`` is empty.
        SingleClass: too few samples on one side to populate every fold.
    """
    X, y = _design(pos, neg)
    _check_fold_sizes(y, cfg)
    alpha, intercept, l2, cv = _nested_fit(X, y, cfg)
    return EnsembleDetector(alphas=alpha, intercept=intercept, l2=l2, cv_auroc=cv)


def validation_auroc(pos, neg, cfg: CvConfig = CvConfig()) -> float:
    """Nested-CV AUROC of the logistic combiner, without the final refit."""
    X, y = _design(pos, neg)
    _check_fold_sizes(y, cfg)
    return _nested_fit(X, y, cfg, final=False)[3]


def select_epsilon(net: RefNet, layer_models, pos_x, neg_x, grid=NOISE_GRID,
                   cfg: CvConfig = CvConfig(), layers=None) -> tuple[float, dict[float, float]]:
    """Noise magnitude with the best nested-CV AUROC; ties go to the smaller value."""
    grid = sorted(float(e) for e in grid)
    if not grid:
        raise EmptySet("epsilon grid is empty")
    scores = {}
    for eps in grid:
        scores[eps] = validation_auroc(
            layer_scores(net, layer_models, pos_x, eps, layers),
            layer_scores(net, layer_models, neg_x, eps, layers),
            cfg,
        )
        logger.debug("eps=%g validation auroc=%.4f", eps, scores[eps])
    best = grid[0]
    for eps in grid[1:]:
        if scores[eps] > scores[best]:
            best = eps
    return best, scores


def fit_detector(net: RefNet, layer_models, pos_x, neg_x, grid=NOISE_GRID,
                 cfg: CvConfig = CvConfig(), layers=None) -> EnsembleDetector:
    """Select the noise magnitude, then train the layer weights on the full validation set."""
    eps, eps_aurocs = select_epsilon(net, layer_models, pos_x, neg_x, grid, cfg, layers)
    det = train_weights(
        layer_scores(net, layer_models, pos_x, eps, layers),
        layer_scores(net, layer_models, neg_x, eps, layers),
        cfg,
    )
    det.eps = eps
    det.layers = list(range(len(layer_models))) if layers is None else list(layers)
    det.layer_models = list(layer_models)
    det.eps_aurocs = eps_aurocs
    return det
