"""Threshold-free detection metrics.

Convention throughout: in-distribution samples are the positive class and a
sample is called positive when ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import SingleClass


class ScoredSample(NamedTuple):
    score: float
    is_positive: bool


def _split(scores, is_positive) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(is_positive, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise SingleClass(
            f"need at least one positive and one negative sample, got "
            f"{int(labels.sum())} positive / {int((~labels).sum())} negative"
        )
    return scores, labels


def from_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Unpack an iterable of :class:`ScoredSample` into score / label arrays."""
    samples = list(samples)
    return (
        np.array([s.score for s in samples], dtype=np.float64),
        np.array([s.is_positive for s in samples], dtype=bool),
    )


def _operating_points(scores: np.ndarray, labels: np.ndarray):
    """TP and FP counts for every distinct threshold, highest threshold first."""
    order = np.argsort(-scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    return s[last], tp[last], fp[last]


def auroc(scores, is_positive) -> float:
    """``P(pos > neg) + P(pos == neg) / 2`` via the rank-sum statistic."""
    scores, labels = _split(scores, is_positive)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, is_positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(fpr, tpr, thresholds)`` starting from the all-negative point."""
    scores, labels = _split(scores, is_positive)
    thr, tp, fp = _operating_points(scores, labels)
    P, N = labels.sum(), (~labels).sum()
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P], np.r_[np.inf, thr]


def tnr_at_tpr(scores, is_positive, tpr_target: float = 0.95) -> float:
    """TNR at the largest threshold whose TPR reaches ``tpr_target``.

    The threshold is the ``ceil(tpr_target * P)``-th largest positive score;
    ties at that score can only push the TPR higher.
    """
    scores, labels = _split(scores, is_positive)
    pos = np.sort(scores[labels])[::-1]
    k = max(1, math.ceil(tpr_target * pos.size - 1e-9))
    delta = pos[k - 1]
    neg = scores[~labels]
    return float(np.mean(neg < delta))


def precision_recall_curve(scores, is_positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(precision, recall, thresholds)`` for every distinct threshold, descending."""
    scores, labels = _split(scores, is_positive)
    thr, tp, fp = _operating_points(scores, labels)
    return tp / (tp + fp), tp / labels.sum(), thr


def aupr(scores, is_positive, positive_side: str = "in") -> float:
    """Area under the precision-recall curve with step interpolation.

    ``positive_side="out"`` treats the negatives as the positive class and
    ranks them by negated score.
    """
    scores, labels = _split(scores, is_positive)
    if positive_side == "out":
        scores, labels = -scores, ~labels
    elif positive_side != "in":
        raise ValueError(f"positive_side must be 'in' or 'out', got {positive_side!r}")
    precision, recall, _ = precision_recall_curve(scores, labels)
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(np.diff(np.r_[0.0, recall]) * precision)


def detection_accuracy(scores, is_positive) -> float:
    """``max_delta (TPR + TNR) / 2`` over every threshold, equal class priors."""
    scores, labels = _split(scores, is_positive)
    _, tp, fp = _operating_points(scores, labels)
    P, N = labels.sum(), (~labels).sum()
    tpr = np.r_[0.0, tp / P]
    tnr = (N - np.r_[0, fp]) / N
    return float(np.max(0.5 * (tpr + tnr)))


@dataclass(frozen=True)
class EvalReport:
    tnr_at_tpr95: float
    auroc: float
    detection_accuracy: float
    aupr_in: float
    aupr_out: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return asdict(self)


COLUMNS = (
    ("TNR@TPR95", "tnr_at_tpr95"),
    ("AUROC", "auroc"),
    ("Det. acc", "detection_accuracy"),
    ("AUPR in", "aupr_in"),
    ("AUPR out", "aupr_out"),
)


def evaluate(scores, is_positive) -> EvalReport:
    scores, labels = _split(scores, is_positive)
    return EvalReport(
        tnr_at_tpr95=tnr_at_tpr(scores, labels),
        auroc=auroc(scores, labels),
        detection_accuracy=detection_accuracy(scores, labels),
        aupr_in=aupr(scores, labels, "in"),
        aupr_out=aupr(scores, labels, "out"),
        n_pos=int(labels.sum()),
        n_neg=int((~labels).sum()),
    )


def evaluate_pos_neg(pos_scores, neg_scores) -> EvalReport:
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    return evaluate(np.r_[pos, neg], np.r_[np.ones(pos.size, bool), np.zeros(neg.size, bool)])


def select_columns(metrics) -> list[tuple[str, str]]:
    if metrics is None:
        return list(COLUMNS)
    known = dict((key, head) for head, key in COLUMNS)
    unknown = [m for m in metrics if m not in known]
    if unknown:
        raise ValueError(f"unknown metric {unknown[0]!r}; choose from {', '.join(known)}")
    return [(known[m], m) for m in metrics]


def format_table(reports: dict[str, EvalReport], metrics=None) -> str:
    """Aligned plain-text table, one row per method, percentages to 2 decimals.

    ``metrics`` picks and orders the columns by report field name.
    """
    columns = select_columns(metrics)
    name_w = max([len("Method")] + [len(k) for k in reports])
    widths = [max(len(h), 6) for h, _ in columns]
    header = "  ".join([f"{'Method':<{name_w}}"] + [f"{h:>{w}}" for (h, _), w in zip(columns, widths)])
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        cells = [f"{100.0 * getattr(rep, key):>{w}.2f}" for (_, key), w in zip(columns, widths)]
        lines.append("  ".join([f"{name:<{name_w}}"] + cells))
    return "\n".join(lines) + "\n"


def format_delimited(reports: dict[str, EvalReport], sep: str = ",", metrics=None) -> str:
    """Machine-readable table with fractions (not percentages) at full precision."""
    keys = ["method"] + [key for _, key in select_columns(metrics)] + ["n_pos", "n_neg"]
    lines = [sep.join(keys)]
    for name, rep in reports.items():
        d = rep.to_dict()
        lines.append(sep.join([name] + [repr(d[k]) for k in keys[1:]]))
    return "\n".join(lines) + "\n"


def reports_to_json(reports: dict[str, EvalReport], config: dict | None = None) -> str:
    doc = {"version": 1, "reports": {k: v.to_dict() for k, v in reports.items()}}
    if config is not None:
        doc["config"] = config
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
