from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_labelled
from mahalanobis_ood import gda, incremental, linalg
from mahalanobis_ood.errors import DimMismatch, EmptySet, TooFewSamples
from mahalanobis_ood.gda import FeatureMatrix


@settings(max_examples=25, deadline=None)
@given(C=st.integers(1, 6), d=st.integers(1, 16), n=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_equal_sizes_match_batch_fit(C, d, n, seed):
    rng = np.random.default_rng(seed)
    data = random_labelled(rng, n, C + 1, d)
    base = FeatureMatrix(data.values[data.labels < C], data.labels[data.labels < C])
    new = data.values[data.labels == C]
    state = incremental.add_class(gda.fit(base, rel_ridge=0.0), new)
    batch = gda.fit(data, rel_ridge=0.0)
    np.testing.assert_allclose(state.model.tied_cov, batch.tied_cov, rtol=0, atol=1e-10 * max(1.0, np.abs(batch.tied_cov).max()))
    np.testing.assert_allclose(state.model.means, batch.means, rtol=1e-13, atol=1e-13)
    assert incremental.batch_discrepancy(state, data) < 1e-10


def test_convex_combination_formula(rng):
    data = random_labelled(rng, 40, 3, 4)
    model = gda.fit(data)
    new = rng.normal(size=(25, 4)) + data.values[data.labels == 0].mean(0)
    state = incremental.add_class(model, new)
    centred = new - new.mean(0)
    want = 0.75 * model.tied_cov + 0.25 * centred.T @ centred / 25
    np.testing.assert_allclose(state.model.tied_cov, want, rtol=1e-14, atol=1e-15)
    assert np.array_equal(state.model.means[:3], model.means)
    assert state.num_classes == 4 and state.history == (3, 4)
    assert np.allclose(state.model.tied_cov, state.model.tied_cov.T)
    assert np.all(np.linalg.eigvalsh(state.model.tied_cov) > 0)


def test_zero_variance_class_shrinks(rng):
    model = gda.fit(random_labelled(rng, 20, 2, 3))
    state = incremental.add_class(model, np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_allclose(state.model.tied_cov, (2 / 3) * model.tied_cov, rtol=1e-15)


def test_repeated_additions_keep_old_means(rng):
    model = gda.fit(random_labelled(rng, 20, 2, 3))
    state = incremental.start(model)
    for _ in range(4):
        state = incremental.add_class(state, rng.normal(size=(10, 3)))
    assert state.num_classes == 6 and state.history == (2, 3, 4, 5, 6)
    assert np.array_equal(state.model.means[:2], model.means)


def test_unequal_sizes_report_discrepancy(rng):
    base = random_labelled(rng, 50, 2, 3)
    new = rng.normal(size=(5, 3)) * 4
    state = incremental.add_class(gda.fit(base), new)
    everything = FeatureMatrix(np.vstack([base.values, new]), np.r_[base.labels, np.full(5, 2)])
    assert incremental.batch_discrepancy(state, everything) > 1e-3


def test_add_class_errors(rng):
    model = gda.fit(random_labelled(rng, 10, 2, 3))
    with pytest.raises(TooFewSamples):
        incremental.add_class(model, np.zeros((1, 3)))
    with pytest.raises(DimMismatch):
        incremental.add_class(model, np.zeros((4, 2)))


def test_state_round_trip(rng):
    state = incremental.add_class(gda.fit(random_labelled(rng, 10, 2, 3)), rng.normal(size=(6, 3)))
    back = incremental.IncrementalState.from_dict(json.loads(json.dumps(state.to_dict())))
    assert back.history == state.history
    assert np.array_equal(back.model.tied_cov, state.model.tied_cov)
    assert np.array_equal(back.model.means, state.model.means)


# -- bias sweep --------------------------------------------------------------

def _model(means, cov):
    means, cov = np.asarray(means, float), np.asarray(cov, float)
    return gda.GaussianModel(means, cov, linalg.cholesky_with_ridge(cov, 0.0), np.ones(len(means), int))


def test_single_pair_separable():
    model = _model([[0.0], [10.0]], [[1.0]])
    curve, auc = incremental.sweep_auc(model, FeatureMatrix([[0.1]], [0]), FeatureMatrix([[9.9]], [1]), 1)
    assert auc == 1.0


def test_separable_new_class_gives_base_accuracy(rng):
    # two overlapping base classes, new class far away
    model = _model([[0.0, 0.0], [1.0, 0.0], [50.0, 50.0]], np.eye(2))
    yb = np.arange(200) % 2
    base = FeatureMatrix(model.means[yb] + rng.normal(size=(200, 2)), yb)
    new = FeatureMatrix(model.means[2] + rng.normal(size=(100, 2)), np.full(100, 2))
    base_acc = np.mean(np.argmin(model.distances(base.values)[:, :2], axis=1) == yb)
    _, auc = incremental.sweep_auc(model, base, new, 2)
    assert 0.5 < base_acc < 1
    assert auc == pytest.approx(base_acc, abs=1e-12)


def test_identical_new_class_halves_area(rng):
    model = _model([[0.0, 0.0], [0.0, 0.0]], np.eye(2))
    shifted = _model([[0.0, 0.0], [0.01, 0.0]], np.eye(2))
    base = FeatureMatrix(rng.normal(size=(400, 2)), np.zeros(400, int))
    new = FeatureMatrix(rng.normal(size=(400, 2)), np.ones(400, int))
    for m in (model, shifted):
        _, auc = incremental.sweep_auc(m, base, new, 1)
        assert auc == pytest.approx(0.5, abs=0.05)


def _three_class_case(rng):
    data = random_labelled(rng, 60, 4, 3, spread=1.5)
    base = FeatureMatrix(data.values[data.labels < 3], data.labels[data.labels < 3])
    new = FeatureMatrix(data.values[data.labels == 3], data.labels[data.labels == 3])
    model = incremental.add_class(gda.fit(base), new.values).model
    return model, base, new


def test_curve_is_monotone_trade_off(rng):
    model, base, new = _three_class_case(rng)
    curve, auc = incremental.sweep_auc(model, base, new, 3)
    assert curve.new_accuracy[0] == 0.0 and curve.base_accuracy[-1] == 0.0
    assert np.all(np.diff(curve.new_accuracy) >= 0) and np.all(np.diff(curve.base_accuracy) <= 0)
    assert 0.0 <= auc <= 1.0


def test_monotone_rescale_invariance(rng):
    model, base, new = _three_class_case(rng)
    _, auc = incremental.sweep_auc(model, base, new, 3)
    # scaling the covariance by k divides every distance by k
    scaled = _model(model.means, 7.5 * model.tied_cov)
    _, auc2 = incremental.sweep_auc(scaled, base, new, 3)
    assert auc2 == pytest.approx(auc, abs=1e-12)


def test_euclidean_metric_and_errors(rng):
    model, base, new = _three_class_case(rng)
    _, auc = incremental.sweep_auc(model, base, new, 3, metric="euclidean")
    assert 0.0 <= auc <= 1.0
    with pytest.raises(EmptySet):
        incremental.sweep_auc(model, FeatureMatrix(np.zeros((0, 3)), np.zeros(0, int)), new, 3)
    with pytest.raises(EmptySet):
        incremental.sweep_auc(model, FeatureMatrix(base.values), new, 3)
    with pytest.raises(ValueError):
        incremental.sweep_auc(model, base, new, 4)
    with pytest.raises(ValueError):
        incremental.sweep_auc(model, base, new, 3, metric="cosine")
