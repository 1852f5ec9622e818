"""Negative-sample generators: FGSM, BIM, noisy copies and the garbage attack.

The garbage attack descends the Mahalanobis distance of one or more taps to a
target class mean, starting from seeded noise, with a step that is halved
until the distance does not increase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence
from .refnet import CrossEntropy, MahalanobisTo, RefNet, Sum, input_gradient, value_and_input_gradient


@dataclass(frozen=True)
class AttackConfig:
    eps_fgsm: float = 0.25
    eps_bim: float = 0.25
    alpha_bim: float = 0.025
    bim_iters: int = 20
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if min(self.eps_fgsm, self.eps_bim, self.alpha_bim) < 0:
            raise ValueError("attack magnitudes must be >= 0")
        if self.alpha_bim > self.eps_bim:
            raise ValueError("BIM step must not exceed the ball radius")
        if self.bim_iters < 1:
            raise ValueError("BIM needs at least one iteration")


def _clip(x: np.ndarray, clip) -> np.ndarray:
    return x if clip is None else np.clip(x, clip[0], clip[1])


def fgsm(net: RefNet, x, labels, eps: float, clip=None) -> np.ndarray:
    """``x + eps * sign(grad_x CE(label, P(y|x)))``."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    grad = input_gradient(net, x, CrossEntropy(np.asarray(labels)))
    return _clip(x + eps * np.sign(grad), clip)


def bim(net: RefNet, x, labels, eps: float, alpha: float, iters: int, clip=None) -> np.ndarray:
    """Iterated FGSM steps of size ``alpha``, projected onto the ``eps`` box around ``x``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x - eps, x + eps
    adv = x.copy()
    objective = CrossEntropy(np.asarray(labels))
    for _ in range(iters):
        adv = adv + alpha * np.sign(input_gradient(net, adv, objective))
        adv = _clip(np.minimum(np.maximum(adv, lo), hi), clip)
    return adv


def noisy(x, eps: float, seed: int = 7, clip=None) -> np.ndarray:
    """``x`` plus uniform noise in ``[-eps, eps]`` (benign 'noisy' examples)."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return _clip(x + rng.uniform(-eps, eps, size=x.shape), clip)


@dataclass(frozen=True)
class GarbageConfig:
    target_class: int = 0
    step: float = 0.1
    iterations: int = 500
    layers: tuple[int, ...] | None = None
    init_scale: float = 1.0
    seed: int = 7
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step < 0:
            raise ValueError("step must be >= 0")


@dataclass
class GarbageResult:
    x: np.ndarray
    distances: np.ndarray

    @property
    def final_distance(self) -> np.ndarray:
        return self.distances[-1]


def garbage_attack(net: RefNet, layer_models, cfg: GarbageConfig, n: int = 1, start=None) -> GarbageResult:
    """Minimise the summed Mahalanobis distance to ``cfg.target_class`` at the chosen taps.

    ``layers=None`` attacks only the penultimate tap. ``layer_models`` is
    indexed by tap. Each row runs its own backtracking line search, so every
    row's distance sequence is non-increasing.
    """
    layers = (net.num_taps - 1,) if cfg.layers is None else tuple(cfg.layers)
    c = cfg.target_class
    objective = Sum(tuple(MahalanobisTo(l, layer_models[l].precision, layer_models[l].means[c]) for l in layers))
    if start is None:
        rng = np.random.default_rng(cfg.seed)
        start = rng.normal(0.0, cfg.init_scale, size=(n, net.input_dim))
    x = _clip(np.atleast_2d(np.asarray(start, dtype=np.float64)).copy(), cfg.clip)
    value, grad = value_and_input_gradient(net, x, objective)
    history = [value.copy()]
    if cfg.step == 0:
        return GarbageResult(x, np.array(history))
    for _ in range(cfg.iterations):
        # start from the fixed step, halve until the distance does not increase
        step = np.full(x.shape[0], cfg.step)
        active = np.ones(x.shape[0], dtype=bool)
        new_x, new_val = x.copy(), value.copy()
        for _ in range(60):
            if not active.any():
                break
            trial = _clip(x[active] - step[active, None] * grad[active], cfg.clip)
            tv, _ = value_and_input_gradient(net, trial, objective)
            ok = tv <= value[active]
            idx = np.flatnonzero(active)
            new_x[idx[ok]] = trial[ok]
            new_val[idx[ok]] = tv[ok]
            active[idx[ok]] = False
            step[active] *= 0.5
        x, value = new_x, new_val
        _, grad = value_and_input_gradient(net, x, objective)
        history.append(value.copy())
    dist = np.array(history)
    if np.any(dist[-1] > dist[0]):
        raise NonConvergence("garbage attack increased the distance")
    return GarbageResult(x, dist)
