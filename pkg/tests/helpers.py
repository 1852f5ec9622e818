from __future__ import annotations

import numpy as np

from mahalanobis_ood import gda


def random_spd(rng, d, cond=10.0):
    q = np.linalg.qr(rng.normal(size=(d, d)))[0]
    return (q * np.geomspace(1.0, cond, d)) @ q.T


def random_labelled(rng, n_per_class, C, d, spread=3.0):
    means = rng.normal(size=(C, d)) * spread
    y = np.repeat(np.arange(C), n_per_class)
    X = means[y] + rng.normal(size=(y.size, d))
    return gda.FeatureMatrix(X, y)
