"""Class-conditional Gaussians with a tied covariance.

Fitting, the Mahalanobis confidence score, the generative classification
rule, and the posterior that a softmax head induces on the same Gaussian
family (plus the hybrid of the two).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import (
    BadLambda,
    DegenerateDim,
    DimMismatch,
    EmptyClass,
    MissingLabels,
)
from .linalg import (
    DEFAULT_REL_RIDGE,
    SpdFactor,
    cholesky_fixed,
    cholesky_with_ridge,
    solve_spd,
    whiten,
)

LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class FeatureMatrix:
    """``n x d`` feature rows with optional integer labels."""

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if values.ndim != 2:
            raise DimMismatch(f"features must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != values.shape[0]:
                raise DimMismatch(
                    f"{labels.shape[0] if labels.ndim else 0} labels for {values.shape[0]} rows"
                )
            if labels.size and (not np.issubdtype(labels.dtype, np.integer)):
                if not np.all(labels == np.round(labels)):
                    raise MissingLabels("labels must be integers")
            labels = labels.astype(np.int64)
            if labels.size and labels.min() < 0:
                raise MissingLabels("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GaussianModel:
    """Per-class means, a shared covariance and its regularised Cholesky factor."""

    means: np.ndarray
    tied_cov: np.ndarray
    precision: SpdFactor
    class_counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def priors(self) -> np.ndarray:
        counts = np.asarray(self.class_counts, dtype=np.float64)
        return counts / counts.sum()

    def _rows(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise DimMismatch(f"input has dimension {x.shape[1]}, model expects {self.dim}")
        return x, single

    def distances(self, x) -> np.ndarray:
        """Squared Mahalanobis distance to every class mean, shape ``(n, C)`` (or ``(C,)``)."""
        x, single = self._rows(x)
        out = np.empty((x.shape[0], self.num_classes))
        for c, mu in enumerate(self.means):
            z = whiten(self.precision, x - mu)
            out[:, c] = np.einsum("ij,ij->i", z, z)
        return out[0] if single else out

    def generative_logits(self, x) -> np.ndarray:
        """``mu_c^T S^-1 x - mu_c^T S^-1 mu_c / 2 + log prior_c`` for every class."""
        return _linear_logits(self.precision, self.means, np.log(self.priors), x, self.dim)


def _linear_logits(factor: SpdFactor, means: np.ndarray, log_priors: np.ndarray, x, dim: int):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise DimMismatch(f"input has dimension {x.shape[-1]}, model expects {dim}")
    # S^-1 mu_c for every class, as rows
    proj = solve_spd(factor, means)
    quad = np.einsum("ij,ij->i", means, proj)
    return x @ proj.T - 0.5 * quad + log_priors


def _labelled(features: FeatureMatrix, num_classes: int | None) -> tuple[np.ndarray, np.ndarray, int]:
    if features.labels is None:
        raise MissingLabels("fit requires labelled features")
    if features.d == 0:
        raise DegenerateDim("features have zero dimensions")
    labels = features.labels
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= C:
        raise MissingLabels(f"label {labels.max()} out of range for {C} classes")
    counts = np.bincount(labels, minlength=C)
    small = np.flatnonzero(counts < 2)
    if small.size:
        raise EmptyClass(f"class {int(small[0])} has {int(counts[small[0]])} samples; need >= 2")
    return features.values, labels, C


def fit(
    features: FeatureMatrix,
    rel_ridge: float = DEFAULT_REL_RIDGE,
    num_classes: int | None = None,
) -> GaussianModel:
    """Empirical class means and the pooled covariance with divisor ``N``.

    Raises:
        MissingLabels: ``features`` carries no labels.
        EmptyClass: some class in ``[0, C)`` has fewer than two samples.
        DegenerateDim: ``d == 0``.
    """
    X, y, C = _labelled(features, num_classes)
    N, d = X.shape
    counts = np.bincount(y, minlength=C)
    means = np.zeros((C, d))
    np.add.at(means, y, X)
    means /= counts[:, None]
    centred = X - means[y]
    cov = centred.T @ centred / N
    cov = 0.5 * (cov + cov.T)
    return GaussianModel(
        means=means,
        tied_cov=cov,
        precision=cholesky_with_ridge(cov, rel_ridge),
        class_counts=counts,
    )


def confidence_score(model: GaussianModel, x) -> float | np.ndarray:
    """Largest negative squared Mahalanobis distance over classes (always <= 0)."""
    dist = model.distances(x)
    return -dist.min(axis=-1) if dist.ndim == 2 else -float(dist.min())


def classify(model: GaussianModel, x, use_prior: bool = False):
    """Nearest class mean under the Mahalanobis metric.

    With ``use_prior`` the rule becomes ``argmin_c dist_c - 2 log prior_c``,
    which maximises the Gaussian posterior. Ties go to the lowest index.
    """
    dist = model.distances(x)
    if use_prior:
        dist = dist - 2.0 * np.log(model.priors)
    out = np.argmin(dist, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def generative_posterior(model: GaussianModel, x) -> np.ndarray:
    """Bayes posterior of the sample-based tied-covariance Gaussian model."""
    return softmax(model.generative_logits(x), axis=-1)


@dataclass(frozen=True)
class HybridClassifier:
    """Sample-based Gaussian model together with the one induced from a softmax head.

    ``induced_means`` are ``S w_c`` where ``S`` is the matrix the precision
    factor actually represents (tied covariance plus ridge), so that the
    induced generative posterior reproduces the softmax head to rounding.
    """

    base: GaussianModel
    softmax_weights: np.ndarray
    softmax_biases: np.ndarray
    lam: float = 0.5
    induced_means: np.ndarray = field(init=False)
    induced_log_priors: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise BadLambda(f"lambda must lie in [0, 1], got {self.lam}")
        W = np.atleast_2d(np.asarray(self.softmax_weights, dtype=np.float64))
        b = np.asarray(self.softmax_biases, dtype=np.float64).reshape(-1)
        if W.shape[1] != self.base.dim or b.shape[0] != W.shape[0] or W.shape[0] != self.base.num_classes:
            raise DimMismatch(
                f"softmax head {W.shape} / {b.shape} incompatible with a {self.base.num_classes}-class, "
                f"{self.base.dim}-dim model"
            )
        object.__setattr__(self, "softmax_weights", W)
        object.__setattr__(self, "softmax_biases", b)
        mu = W @ self.base.precision.matrix()
        quad = np.einsum("ij,ij->i", mu, solve_spd(self.base.precision, mu))
        unnorm = 0.5 * quad + b
        object.__setattr__(self, "induced_means", mu)
        object.__setattr__(self, "induced_log_priors", unnorm - logsumexp(unnorm))

    @property
    def induced_priors(self) -> np.ndarray:
        return np.exp(self.induced_log_priors)

    def with_lambda(self, lam: float) -> "HybridClassifier":
        return HybridClassifier(self.base, self.softmax_weights, self.softmax_biases, lam)

    def induced_logits(self, x) -> np.ndarray:
        return _linear_logits(
            self.base.precision, self.induced_means, self.induced_log_priors, x, self.base.dim
        )


def softmax_equivalent_posterior(h: HybridClassifier, x) -> np.ndarray:
    """Generative posterior of the Gaussian model induced from the softmax head."""
    return softmax(h.induced_logits(x), axis=-1)


def hybrid_posterior(h: HybridClassifier, x, lam: float | None = None) -> np.ndarray:
    """Softmax of ``lam * sample-based logit + (1 - lam) * induced logit``."""
    lam = h.lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise BadLambda(f"lambda must lie in [0, 1], got {lam}")
    logits = lam * h.base.generative_logits(x) + (1.0 - lam) * h.induced_logits(x)
    return softmax(logits, axis=-1)


def select_lambda(h: HybridClassifier, x_val, y_val, grid=LAMBDA_GRID) -> tuple[float, list[float]]:
    """Pick the lambda with the best validation accuracy; ties go to the smaller value."""
    y_val = np.asarray(y_val)
    accs = [float(np.mean(np.argmax(hybrid_posterior(h, x_val, lam), axis=1) == y_val)) for lam in grid]
    best = int(np.argmax(accs))
    return float(grid[best]), accs


def to_dict(model: GaussianModel) -> dict:
    return {
        "version": 1,
        "C": model.num_classes,
        "d": model.dim,
        "means": model.means.tolist(),
        "tied_cov": model.tied_cov.tolist(),
        "class_counts": [int(c) for c in model.class_counts],
        "ridge_used": model.precision.ridge_used,
    }


def from_dict(doc: dict) -> GaussianModel:
    means = np.asarray(doc["means"], dtype=np.float64).reshape(doc["C"], doc["d"])
    cov = np.asarray(doc["tied_cov"], dtype=np.float64).reshape(doc["d"], doc["d"])
    return GaussianModel(
        means=means,
        tied_cov=cov,
        precision=cholesky_fixed(cov, float(doc["ridge_used"])),
        class_counts=np.asarray(doc["class_counts"], dtype=np.int64),
    )
