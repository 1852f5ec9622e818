from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mahalanobis_ood import ensemble, gda, linalg
from mahalanobis_ood.ensemble import CvConfig, EnsembleDetector
from mahalanobis_ood.errors import DimMismatch, EmptySet, SingleClass
from mahalanobis_ood.metrics import auroc
from mahalanobis_ood.preprocess import NOISE_GRID
from mahalanobis_ood.refnet import RefNet
from oracles import central_difference, gauss_jordan_inverse, quad_form, scalar_taps

QUICK = CvConfig(l2_grid=(1e-2,), iterations=300)


def _lab(pos, neg):
    return np.r_[pos, neg], np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]


def _net_and_models(seed=3, n=240):
    rng = np.random.default_rng(seed)
    net = RefNet.init([4, 7, 5, 3], seed=seed)
    x = rng.normal(size=(n, 4))
    data = gda.FeatureMatrix(x, np.arange(n) % 3)
    return net, ensemble.fit_layer_models(net, data, num_classes=3), rng


def test_eps_zero_single_layer_reduces_to_score(rng):
    net, models, _ = _net_and_models()
    x = rng.normal(size=(15, 4))
    for layer in (0, 1):
        s = ensemble.layer_scores(net, [models[layer]], x, 0.0, [layer])
        assert np.array_equal(s[:, 0], gda.confidence_score(models[layer], net.taps(x, layer)))


def test_zero_at_means():
    net = RefNet([2, 2, 2, 2], [np.eye(2)] * 3, [np.zeros(2)] * 3, activation="linear")
    mean = np.array([[0.3, -0.7]])
    model = gda.GaussianModel(mean, np.eye(2), linalg.cholesky_with_ridge(np.eye(2), 0.0), np.ones(1, int))
    s = ensemble.layer_scores(net, [model, model], mean[0])
    assert np.array_equal(s, [0.0, 0.0])


def _alg1_oracle(net, models, x, eps):
    """Per-layer closest class, sign step on the finite-difference gradient, then score."""
    out = []
    for layer, model in enumerate(models):
        inv = gauss_jordan_inverse(model.tied_cov + model.precision.ridge_used * np.eye(model.dim))

        def dist(v, c):
            return quad_form(inv, np.subtract(scalar_taps(net, v)[layer], model.means[c]))

        c = min(range(model.num_classes), key=lambda k: dist(x, k))
        g = central_difference(lambda v: dist(v, c), x, h=1e-6)
        xh = [x[i] - eps * (1.0 if g[i] > 0 else -1.0 if g[i] < 0 else 0.0) for i in range(len(x))]
        out.append(max(-dist(xh, k) for k in range(model.num_classes)))
    return np.array(out)


def test_matches_line_by_line_oracle(rng):
    net, models, _ = _net_and_models(seed=11)
    models = models[:2]
    for x in rng.normal(size=(6, 4)):
        got = ensemble.layer_scores(net, models, x, 0.01)
        np.testing.assert_allclose(got, _alg1_oracle(net, models, x, 0.01), rtol=1e-8, atol=1e-10)
        assert np.all(got <= 0)


def test_combine_examples():
    assert ensemble.combine(EnsembleDetector([1.0]), [-2.5]) == -2.5
    assert ensemble.combine(EnsembleDetector([0.0, 0.0, 1.0]), [-1.0, -2.0, -3.0]) == -3.0
    assert ensemble.combine(EnsembleDetector([0.3, 0.7]), [-2.0, -4.0]) == pytest.approx(-3.4, abs=1e-15)
    assert ensemble.combine(EnsembleDetector([1.0, 1.0], intercept=2.0), [-1.0, -1.0]) == 0.0
    with pytest.raises(DimMismatch):
        ensemble.combine(EnsembleDetector([1.0, 1.0]), [-1.0])
    with pytest.raises(ValueError):
        EnsembleDetector([np.nan])


def test_combine_monotone_in_positive_weights(rng):
    det = EnsembleDetector(rng.uniform(0.1, 2, 3), intercept=0.5)
    s = -rng.uniform(0, 5, 3)
    for j in range(3):
        up = s.copy()
        up[j] += 0.1
        assert ensemble.combine(det, up) > ensemble.combine(det, s)


def test_single_layer_unit_weight_ranking_matches_score(rng):
    net, models, _ = _net_and_models()
    x = rng.normal(size=(50, 4))
    det = EnsembleDetector([1.0], layers=[1], layer_models=[models[1]])
    ref = gda.confidence_score(models[1], net.taps(x, 1))
    assert np.array_equal(np.argsort(det.score(net, x), kind="stable"), np.argsort(ref, kind="stable"))


# -- weight training ---------------------------------------------------------

def test_train_separable():
    det = ensemble.train_weights(np.zeros((20, 1)), np.full((20, 1), -10.0), QUICK)
    s, y = _lab(ensemble.combine(det, np.zeros((20, 1))), ensemble.combine(det, np.full((20, 1), -10.0)))
    assert auroc(s, y) == 1.0
    assert det.alphas[0] > 0


def test_train_uninformative(rng):
    v = rng.normal(size=(100, 2))
    det = ensemble.train_weights(v[:50], v[50:], CvConfig())
    assert det.cv_auroc == pytest.approx(0.5, abs=0.1)


def test_only_second_layer_informative(rng):
    def draw(n, shift):
        return np.c_[rng.normal(size=n), rng.normal(size=n) + shift]

    det = ensemble.train_weights(draw(100, 0.0), draw(100, -5.0), CvConfig())
    assert abs(det.alphas[1]) > 10 * abs(det.alphas[0])
    pos, neg = draw(200, 0.0), draw(200, -5.0)
    assert auroc(*_lab(ensemble.combine(det, pos), ensemble.combine(det, neg))) >= 0.95


@settings(max_examples=10, deadline=None)
@given(a=st.floats(0.01, 100.0), b=st.floats(-50.0, 50.0), seed=st.integers(0, 1000))
def test_affine_rescale_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    pos = np.c_[rng.normal(0, 1, 40), rng.normal(0.5, 1, 40)]
    neg = np.c_[rng.normal(-1, 1, 40), rng.normal(0, 1, 40)]
    det = ensemble.train_weights(pos, neg, QUICK)
    tp, tn = pos.copy(), neg.copy()
    tp[:, 0] = a * tp[:, 0] + b
    tn[:, 0] = a * tn[:, 0] + b
    det2 = ensemble.train_weights(tp, tn, QUICK)
    assert det2.cv_auroc == pytest.approx(det.cv_auroc, abs=1e-12)
    s1 = np.r_[ensemble.combine(det, pos), ensemble.combine(det, neg)]
    s2 = np.r_[ensemble.combine(det2, tp), ensemble.combine(det2, tn)]
    y = np.r_[np.ones(40, bool), np.zeros(40, bool)]
    assert auroc(s2, y) == pytest.approx(auroc(s1, y), abs=1e-12)


def test_train_deterministic(rng):
    pos, neg = rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) - 1
    a, b = ensemble.train_weights(pos, neg, QUICK), ensemble.train_weights(pos, neg, QUICK)
    assert np.array_equal(a.alphas, b.alphas) and a.intercept == b.intercept


def test_train_errors():
    with pytest.raises(EmptySet):
        ensemble.train_weights(np.zeros((0, 1)), np.zeros((10, 1)))
    with pytest.raises(SingleClass):
        ensemble.train_weights(np.zeros((3, 1)), np.ones((30, 1)))
    with pytest.raises(DimMismatch):
        ensemble.train_weights(np.zeros((10, 1)), np.ones((10, 2)))


# -- noise selection ---------------------------------------------------------

def _scalar_setup(mean=0.0):
    net = RefNet([1, 1, 1], [np.eye(1), np.eye(1)], [np.zeros(1), np.zeros(1)], activation="linear")
    m = np.array([[mean]])
    model = gda.GaussianModel(m, np.eye(1), linalg.cholesky_with_ridge(np.eye(1), 0.0), np.ones(1, int))
    return net, [model]


def test_select_single_point_grid(rng):
    net, models, _ = _net_and_models()
    eps, aucs = ensemble.select_epsilon(net, models, rng.normal(size=(20, 4)), rng.normal(size=(20, 4)) + 1,
                                        grid=(0.0,), cfg=QUICK)
    assert eps == 0.0 and list(aucs) == [0.0]
    with pytest.raises(EmptySet):
        ensemble.select_epsilon(net, models, rng.normal(size=(20, 4)), rng.normal(size=(20, 4)), grid=())


def test_select_no_effect_ties_to_zero(rng):
    # a dead ReLU layer makes every input gradient zero
    net = RefNet([2, 3, 2], [np.zeros((3, 2)), np.ones((2, 3))], [np.full(3, -1.0), np.zeros(2)])
    m = np.ones((1, 3))
    model = gda.GaussianModel(m, np.eye(3), linalg.cholesky_with_ridge(np.eye(3), 0.0), np.ones(1, int))
    eps, aucs = ensemble.select_epsilon(net, [model], rng.normal(size=(20, 2)), rng.normal(size=(20, 2)),
                                        cfg=QUICK)
    assert eps == 0.0
    assert len(set(aucs.values())) == 1


def test_select_constructed_case(rng):
    net, models = _scalar_setup()
    # |x| = 0.01 in-distribution, |x| in {0.005, 0.015} out: only eps = 0.01 separates them
    pos = 0.01 * rng.choice([-1.0, 1.0], size=(20, 1))
    neg = np.r_[0.005 * np.ones(10), 0.015 * np.ones(10)][:, None] * rng.choice([-1.0, 1.0], size=(20, 1))
    s0 = np.r_[ensemble.layer_scores(net, models, pos)[:, 0], ensemble.layer_scores(net, models, neg)[:, 0]]
    y = np.r_[np.ones(20, bool), np.zeros(20, bool)]
    assert auroc(s0, y) == 0.5
    eps, aucs = ensemble.select_epsilon(net, models, pos, neg, NOISE_GRID, QUICK)
    assert eps == 0.01
    assert aucs[0.01] == 1.0 and max(v for e, v in aucs.items() if e != 0.01) < 1.0


# -- end to end and serialisation ---------------------------------------------

def test_fit_detector_round_trip(rng):
    net, models, _ = _net_and_models()
    pos, neg = rng.normal(size=(30, 4)), rng.normal(size=(30, 4)) * 3
    det = ensemble.fit_detector(net, models, pos, neg, grid=(0.0, 0.01), cfg=QUICK)
    assert det.eps in (0.0, 0.01) and det.alphas.size == len(models)
    det2 = EnsembleDetector.from_dict(json.loads(json.dumps(det.to_dict())))
    x = rng.normal(size=(10, 4))
    assert np.array_equal(det.score(net, x), det2.score(net, x))
    assert np.array_equal(det.alphas, det2.alphas) and det.intercept == det2.intercept
