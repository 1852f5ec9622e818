"""Input pre-processing: nudge an input so its Mahalanobis score at one tap rises."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gda import GaussianModel
from .refnet import MahalanobisTo, RefNet, input_gradient

NOISE_GRID = (0.0, 0.0005, 0.001, 0.0014, 0.002, 0.0024, 0.005, 0.01, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class PreprocessConfig:
    epsilon: float = 0.0
    grid: tuple[float, ...] = NOISE_GRID
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon < 0 or any(e < 0 for e in self.grid):
            raise ValueError("noise magnitudes must be >= 0")


def closest_class(net: RefNet, model: GaussianModel, layer: int, x) -> np.ndarray:
    """Index of the nearest class mean (Mahalanobis) at tap ``layer`` for each row."""
    return np.argmin(model.distances(net.taps(np.atleast_2d(x), layer)), axis=1)


def perturb(net: RefNet, model: GaussianModel, layer: int, x, eps: float,
            clip: tuple[float, float] | None = None) -> np.ndarray:
    """``x - eps * sign(grad_x dist_c(x))`` with ``c`` the closest class at ``layer``.

    ``eps == 0`` returns an exact copy of ``x``.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    rows = np.atleast_2d(x)
    c = closest_class(net, model, layer, rows)
    grad = input_gradient(net, rows, MahalanobisTo(layer, model.precision, model.means[c]))
    out = rows - eps * np.sign(grad)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out[0] if x.ndim == 1 else out
