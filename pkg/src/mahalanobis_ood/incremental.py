"""Class-incremental updates of the tied-covariance Gaussian classifier.

New classes are appended with their own mean, and the shared covariance is
blended as ``C/(C+1) * S + 1/(C+1) * S_new``. This weights by class count
rather than sample count, so it only equals a batch refit when every class
has the same number of samples; :func:`batch_discrepancy` reports the gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import gda
from .baselines import euclidean_distances
from .errors import DimMismatch, EmptySet, TooFewSamples
from .gda import FeatureMatrix, GaussianModel
from .linalg import DEFAULT_REL_RIDGE, cholesky_with_ridge


@dataclass(frozen=True)
class IncrementalState:
    model: GaussianModel
    history: tuple[int, ...] = field(default=())
    rel_ridge: float = DEFAULT_REL_RIDGE

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def to_dict(self) -> dict:
        doc = gda.to_dict(self.model)
        doc["class_count_history"] = list(self.history or (self.num_classes,))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "IncrementalState":
        model = gda.from_dict(doc)
        return cls(model, tuple(doc.get("class_count_history", (model.num_classes,))))


def start(model: GaussianModel, rel_ridge: float = DEFAULT_REL_RIDGE) -> IncrementalState:
    return IncrementalState(model, (model.num_classes,), rel_ridge)


def add_class(state: IncrementalState | GaussianModel, new_samples) -> IncrementalState:
    """Append one class from its (unlabelled) samples and blend the covariance.

    Raises:
        TooFewSamples: fewer than two new samples.
        DimMismatch: sample dimension differs from the model.
    """
    if isinstance(state, GaussianModel):
        state = start(state)
    X = new_samples.values if isinstance(new_samples, FeatureMatrix) else np.atleast_2d(
        np.asarray(new_samples, dtype=np.float64))
    model = state.model
    if X.shape[1] != model.dim:
        raise DimMismatch(f"new samples have dimension {X.shape[1]}, model {model.dim}")
    if X.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 samples for a new class, got {X.shape[0]}")
    C = model.num_classes
    mu = X.mean(axis=0)
    centred = X - mu
    cov_new = centred.T @ centred / X.shape[0]
    cov = (C / (C + 1)) * model.tied_cov + (1.0 / (C + 1)) * cov_new
    cov = 0.5 * (cov + cov.T)
    updated = GaussianModel(
        means=np.vstack([model.means, mu]),
        tied_cov=cov,
        precision=cholesky_with_ridge(cov, state.rel_ridge),
        class_counts=np.r_[model.class_counts, X.shape[0]],
    )
    history = (state.history or (C,)) + (C + 1,)
    return IncrementalState(updated, history, state.rel_ridge)


def batch_discrepancy(state: IncrementalState, all_features: FeatureMatrix) -> float:
    """Relative Frobenius gap between the incremental covariance and a batch refit."""
    batch = gda.fit(all_features, num_classes=state.num_classes)
    diff = np.linalg.norm(state.model.tied_cov - batch.tied_cov)
    return float(diff / max(np.linalg.norm(batch.tied_cov), np.finfo(float).tiny))


@dataclass(frozen=True)
class BiasSweepCurve:
    """Points ``(new_accuracy, base_accuracy)`` ordered by increasing new-class accuracy."""

    new_accuracy: np.ndarray
    base_accuracy: np.ndarray
    biases: np.ndarray


def _distances(model: GaussianModel, x, metric: str) -> np.ndarray:
    if metric == "mahalanobis":
        return model.distances(np.atleast_2d(x))
    if metric == "euclidean":
        return euclidean_distances(model, x)
    raise ValueError(f"unknown metric {metric!r}")


def sweep_auc(model: GaussianModel, base_test: FeatureMatrix, new_test: FeatureMatrix,
              num_base: int, metric: str = "mahalanobis") -> tuple[BiasSweepCurve, float]:
    """Base/new accuracy trade-off as a bias on new-class distances is swept.

    A bias ``b`` is added to the distances of classes ``>= num_base``; ``b``
    runs over every breakpoint where some sample's prediction switches
    between the base and new groups. Returns the curve and its area
    (trapezoid rule over new-class accuracy in ``[0, 1]``).
    """
    if base_test.n == 0 or new_test.n == 0:
        raise EmptySet("both base and new test sets must be non-empty")
    if base_test.labels is None or new_test.labels is None:
        raise EmptySet("test sets must be labelled")
    if not 0 < num_base < model.num_classes:
        raise ValueError(f"num_base must lie in (0, {model.num_classes})")
    X = np.vstack([base_test.values, new_test.values])
    y = np.r_[base_test.labels, new_test.labels]
    is_new_sample = np.r_[np.zeros(base_test.n, bool), np.ones(new_test.n, bool)]
    D = _distances(model, X, metric)
    base_d, new_d = D[:, :num_base], D[:, num_base:]
    base_pred = np.argmin(base_d, axis=1)
    new_pred = num_base + np.argmin(new_d, axis=1)
    # with bias b a sample goes to the new group iff min_new + b < min_base
    gap = base_d.min(axis=1) - new_d.min(axis=1)
    right_if_base = base_pred == y
    right_if_new = new_pred == y
    biases = np.r_[np.inf, np.unique(gap)[::-1], -np.inf]
    base_acc, new_acc = [], []
    nb, nn = base_test.n, new_test.n
    for b in biases:
        to_new = gap > b
        correct = np.where(to_new, right_if_new, right_if_base)
        base_acc.append(correct[~is_new_sample].sum() / nb)
        new_acc.append(correct[is_new_sample].sum() / nn)
    curve = BiasSweepCurve(np.array(new_acc), np.array(base_acc), biases)
    return curve, float(trapezoid(curve.base_accuracy, curve.new_accuracy))
