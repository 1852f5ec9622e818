"""Mahalanobis-distance confidence scores for out-of-distribution and adversarial detection.

Submodules:
    linalg       ridge-regularised Cholesky factors and Mahalanobis distances
    gda          tied-covariance Gaussian fit, confidence score, hybrid posterior
    refnet       small MLP with feature taps and input gradients
    preprocess   input pre-processing towards the closest class
    ensemble     logistic-regression combination of per-tap scores
    baselines    max-softmax, ODIN, Euclidean, kernel density, LID
    attacks      FGSM, BIM, noisy copies, garbage attack
    incremental  class-incremental updates and the bias-sweep AUC
    metrics      TNR@TPR95, AUROC, AUPR, detection accuracy
    fileio       feature files, JSON, score files, run configuration
    synthetic    seeded synthetic data and experiments
    plotting     report figures
"""

from .errors import DetectorError
from .gda import FeatureMatrix, GaussianModel, confidence_score, fit
from .metrics import EvalReport, evaluate

__all__ = ["DetectorError", "EvalReport", "FeatureMatrix", "GaussianModel", "confidence_score", "evaluate", "fit"]
__version__ = "0.1.0"
