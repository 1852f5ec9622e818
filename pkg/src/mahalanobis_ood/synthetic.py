"""Seeded synthetic data and the small end-to-end experiments built on it.

In-distribution data is a Gaussian mixture whose class structure lives in a
low-dimensional latent subspace, plus a little isotropic noise off that
subspace. Off-manifold directions are where input-space attacks push
features, so they give the layer-wise scores something to detect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attacks, baselines, ensemble, gda, incremental, metrics, refnet
from .gda import FeatureMatrix, GaussianModel
from .metrics import EvalReport
from .linalg import DEFAULT_REL_RIDGE
from .preprocess import NOISE_GRID
from .refnet import RefNet, TrainConfig


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 16
    num_classes: int = 4
    latent_dim: int = 4
    spread: float = 3.0
    noise: float = 0.1
    ood_shift: float = 3.0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    rel_ridge: float = DEFAULT_REL_RIDGE
    seed: int = 7

    @classmethod
    def from_run_config(cls, config: dict) -> "SyntheticConfig":
        data, net = config["data"], config["net"]
        return cls(dim=data["dim"], num_classes=data["classes"], latent_dim=data["latent_dim"],
                   spread=data["spread"], noise=data["noise"], ood_shift=data["ood_shift"],
                   n_train=data["n_train"], n_val=data["n_val"], n_test=data["n_test"],
                   hidden=tuple(net["hidden"]), epochs=net["epochs"], batch_size=net["batch_size"],
                   learning_rate=net["learning_rate"], momentum=net["momentum"],
                   rel_ridge=config["gda"]["rel_ridge"], seed=config["seed"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, self.seed)

    def __post_init__(self):
        if not 0 < self.latent_dim <= self.dim:
            raise ValueError("latent_dim must lie in [1, dim]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True)
class MixtureSampler:
    """``x = (mu_y + z) B^T + noise * e`` with ``z ~ N(0, I_k)`` and ``e ~ N(0, I_d)``."""

    basis: np.ndarray
    means: np.ndarray
    noise: float

    @classmethod
    def random(cls, cfg: SyntheticConfig, rng: np.random.Generator) -> "MixtureSampler":
        basis = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.latent_dim)))[0]
        means = rng.normal(size=(cfg.num_classes, cfg.latent_dim)) * cfg.spread
        return cls(basis, means, cfg.noise)

    def sample(self, n: int, rng: np.random.Generator, shift=None) -> FeatureMatrix:
        y = rng.integers(0, self.means.shape[0], n)
        latent = self.means[y] + rng.normal(size=(n, self.means.shape[1]))
        x = latent @ self.basis.T + self.noise * rng.normal(size=(n, self.basis.shape[0]))
        if shift is not None:
            x = x + shift
        return FeatureMatrix(x, y)


@dataclass
class SyntheticSetup:
    """A trained net, its per-tap Gaussians and seeded in/out splits."""

    cfg: SyntheticConfig
    net: RefNet
    layer_models: list[GaussianModel]
    train: FeatureMatrix
    val: FeatureMatrix
    test: FeatureMatrix
    ood_val: FeatureMatrix
    ood_test: FeatureMatrix
    input_std: float
    input_range: float

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.net.predict(self.test.values) == self.test.labels))


_SETUPS: dict[SyntheticConfig, SyntheticSetup] = {}


def build_setup(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticSetup:
    """Sample the splits and train the net. Cached per config, since training dominates."""
    if cfg in _SETUPS:
        return _SETUPS[cfg]
    rng = np.random.default_rng(cfg.seed)
    sampler = MixtureSampler.random(cfg, rng)
    train = sampler.sample(cfg.n_train, rng)
    input_std = float(train.values.std(axis=0).mean())
    input_range = float(np.ptp(train.values, axis=0).mean())
    direction = rng.normal(size=cfg.dim)
    shift = cfg.ood_shift * input_std * direction / np.linalg.norm(direction)
    val, test = sampler.sample(cfg.n_val, rng), sampler.sample(cfg.n_test, rng)
    ood_val, ood_test = sampler.sample(cfg.n_val, rng, shift), sampler.sample(cfg.n_test, rng, shift)
    net = RefNet.init([cfg.dim, *cfg.hidden, cfg.num_classes], seed=cfg.seed)
    net = refnet.train(net, train, cfg.train_config)
    models = ensemble.fit_layer_models(net, train, rel_ridge=cfg.rel_ridge)
    setup = SyntheticSetup(cfg, net, models, train, val, test, ood_val, ood_test, input_std, input_range)
    _SETUPS[cfg] = setup
    return setup


def _penultimate_scores(setup: SyntheticSetup, x) -> np.ndarray:
    last = setup.net.num_taps - 1
    return gda.confidence_score(setup.layer_models[last], setup.net.taps(x, last))


@dataclass
class OodResult:
    reports: dict[str, EvalReport]
    detector: ensemble.EnsembleDetector
    odin: baselines.OdinConfig


def run_ood(setup: SyntheticSetup, cv: ensemble.CvConfig = ensemble.CvConfig(), eps_grid=NOISE_GRID,
            temperatures=baselines.TEMPERATURES) -> OodResult:
    """Baseline, ODIN, penultimate Mahalanobis and the tuned ensemble on the shifted mixture.

    Every hyperparameter is picked on the validation split and reported on the test split.
    ``eps_grid`` serves both the ensemble pre-processing and ODIN.
    """
    net, xin, xout = setup.net, setup.test.values, setup.ood_test.values
    reports = {
        "baseline": metrics.evaluate_pos_neg(baselines.max_softmax(net, xin), baselines.max_softmax(net, xout)),
    }
    odin_grid = baselines.OdinConfig(eps_grid=tuple(eps_grid), temperatures=tuple(temperatures))
    odin, _ = baselines.select_odin(net, setup.val.values, setup.ood_val.values, odin_grid)
    reports["odin"] = metrics.evaluate_pos_neg(baselines.odin_score(net, xin, odin),
                                               baselines.odin_score(net, xout, odin))
    reports["mahalanobis_penultimate"] = metrics.evaluate_pos_neg(_penultimate_scores(setup, xin),
                                                                  _penultimate_scores(setup, xout))
    det = ensemble.fit_detector(net, setup.layer_models, setup.val.values, setup.ood_val.values,
                                grid=eps_grid, cfg=cv)
    reports["mahalanobis_full"] = metrics.evaluate_pos_neg(det.score(net, xin), det.score(net, xout))
    return OodResult(reports, det, odin)


@dataclass
class AdversarialResult:
    eps: float
    clean_accuracy: float
    fgsm_accuracy: float
    bim_accuracy: float
    reports: dict[str, EvalReport]
    detector: ensemble.EnsembleDetector


def run_adversarial(setup: SyntheticSetup, eps_fraction: float = 0.25, bim_iters: int = 20,
                    cv: ensemble.CvConfig = ensemble.CvConfig()) -> AdversarialResult:
    """Train the detector on FGSM negatives (clean and noisy positives), test on FGSM and BIM.

    ``eps`` is ``eps_fraction`` times the mean per-coordinate range of the
    training inputs, the analogue of a fraction of the pixel range.
    """
    net, val, test = setup.net, setup.val, setup.test
    eps = eps_fraction * setup.input_range
    cfg = attacks.AttackConfig(eps_fgsm=eps, eps_bim=eps, alpha_bim=eps / 10, bim_iters=bim_iters)
    fgsm_val = attacks.fgsm(net, val.values, val.labels, cfg.eps_fgsm)
    noisy_val = attacks.noisy(val.values, eps, seed=setup.cfg.seed)
    det = ensemble.fit_detector(net, setup.layer_models, np.vstack([val.values, noisy_val]), fgsm_val, cfg=cv)
    fgsm_test = attacks.fgsm(net, test.values, test.labels, cfg.eps_fgsm)
    bim_test = attacks.bim(net, test.values, test.labels, cfg.eps_bim, cfg.alpha_bim, cfg.bim_iters)
    clean = det.score(net, test.values)
    acc = lambda x: float(np.mean(net.predict(x) == test.labels))  # noqa: E731
    reports = {
        "fgsm": metrics.evaluate_pos_neg(clean, det.score(net, fgsm_test)),
        "bim": metrics.evaluate_pos_neg(clean, det.score(net, bim_test)),
    }
    return AdversarialResult(eps, acc(test.values), acc(fgsm_test), acc(bim_test), reports, det)


@dataclass
class GarbageOutcome:
    report: EvalReport
    target_rate: float
    initial_distance: float
    final_distance: float
    extra: dict[str, EvalReport] = field(default_factory=dict)


def run_garbage(setup: SyntheticSetup, detector: ensemble.EnsembleDetector, n: int = 200,
                target_class: int = 0, iterations: int = 500, step: float = 0.05,
                others: dict[str, ensemble.EnsembleDetector] | None = None) -> GarbageOutcome:
    """Garbage inputs against the penultimate tap, scored against clean test inputs."""
    gcfg = attacks.GarbageConfig(target_class=target_class, step=step, iterations=iterations,
                                 init_scale=setup.input_std, seed=setup.cfg.seed)
    g = attacks.garbage_attack(setup.net, setup.layer_models, gcfg, n=n)
    net, clean = setup.net, setup.test.values
    report = metrics.evaluate_pos_neg(detector.score(net, clean), detector.score(net, g.x))
    extra = {name: metrics.evaluate_pos_neg(d.score(net, clean), d.score(net, g.x))
             for name, d in (others or {}).items()}
    return GarbageOutcome(report, float(np.mean(net.predict(g.x) == target_class)),
                          float(g.distances[0].mean()), float(g.final_distance.mean()), extra)


# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class StreamConfig:
    dim: int = 16
    num_base: int = 6
    num_new: int = 4
    per_class_train: int = 100
    per_class_test: int = 100
    mean_scale: float = 0.5
    cond_range: tuple[float, float] = (0.05, 5.0)


@dataclass
class ClassStream:
    base_train: FeatureMatrix
    new_train: list[np.ndarray]
    base_test: FeatureMatrix
    new_test: FeatureMatrix


def class_stream(seed: int, cfg: StreamConfig = StreamConfig()) -> ClassStream:
    """Classes sharing one anisotropic covariance; labels ``>= num_base`` arrive later."""
    rng = np.random.default_rng(seed)
    total = cfg.num_base + cfg.num_new
    rot = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.dim)))[0]
    sd = np.sqrt(np.geomspace(cfg.cond_range[0], cfg.cond_range[1], cfg.dim))
    root = rot * sd  # covariance = root @ root.T
    means = rng.normal(size=(total, cfg.dim)) * cfg.mean_scale

    def draw(c, n):
        return means[c] + rng.normal(size=(n, cfg.dim)) @ root.T

    def labelled(classes, n):
        return FeatureMatrix(np.vstack([draw(c, n) for c in classes]), np.repeat(np.asarray(classes), n))

    base = range(cfg.num_base)
    new = range(cfg.num_base, total)
    return ClassStream(
        base_train=labelled(base, cfg.per_class_train),
        new_train=[draw(c, cfg.per_class_train) for c in new],
        base_test=labelled(base, cfg.per_class_test),
        new_test=labelled(new, cfg.per_class_test),
    )


def run_incremental(seed: int, cfg: StreamConfig = StreamConfig()) -> dict[str, float]:
    """Sweep AUC of the incrementally grown model under both distance metrics."""
    stream = class_stream(seed, cfg)
    state = incremental.start(gda.fit(stream.base_train))
    for samples in stream.new_train:
        state = incremental.add_class(state, samples)
    return {metric: incremental.sweep_auc(state.model, stream.base_test, stream.new_test,
                                          cfg.num_base, metric)[1]
            for metric in ("mahalanobis", "euclidean")}
