"""Class-weighted binary cross-entropy and confusion-count metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, clip, log, mean, mul, sub

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6


class EmptyInputError(ValueError):
    pass


@dataclass
class ClassWeights:
    w_pos: np.ndarray
    w_neg: np.ndarray

    @classmethod
    def uniform(cls, n_outputs: int) -> "ClassWeights":
        return cls(np.ones(n_outputs), np.ones(n_outputs))


def class_weights(labels) -> ClassWeights:
    """Balancing weights w_pos = 2N/(P+N), w_neg = 2P/(P+N) per output.

    Outputs with no positives or no negatives fall back to 1.0/1.0.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise EmptyInputError("class_weights needs at least one label vector")
    if y.ndim == 1:
        y = y[:, None]
    pos = y.sum(axis=0)
    neg = y.shape[0] - pos
    total = pos + neg
    w_pos = np.ones(y.shape[1])
    w_neg = np.ones(y.shape[1])
    for j in range(y.shape[1]):
        if pos[j] >= 1 and neg[j] >= 1:
            w_pos[j] = 2 * neg[j] / total[j]
            w_neg[j] = 2 * pos[j] / total[j]
        else:
            logger.warning("output %d has only one class present; using weight 1.0", j)
    return ClassWeights(w_pos, w_neg)


def weights_from_prevalence(prevalence) -> ClassWeights:
    p = np.atleast_1d(np.asarray(prevalence, dtype=np.float64))
    return ClassWeights(2 * (1 - p), 2 * p)


def weighted_bce(probs: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """Mean over outputs of -[w_pos*y*log(p) + w_neg*(1-y)*log(1-p)], p clamped."""
    y = np.asarray(labels, dtype=probs.data.dtype).reshape(-1)
    if y.shape != probs.shape:
        raise ShapeError(f"weighted_bce: probs {list(probs.shape)} vs labels {list(y.shape)}")
    if weights is None:
        weights = ClassWeights.uniform(y.size)
    wp = np.asarray(weights.w_pos).reshape(-1)
    wn = np.asarray(weights.w_neg).reshape(-1)
    if wp.size != y.size or wn.size != y.size:
        raise ShapeError("weighted_bce: weight length does not match outputs")
    p = clip(probs, PROB_EPS, 1 - PROB_EPS)
    one = Tensor(np.ones(y.size))
    pos_coef = Tensor(-wp * y)
    neg_coef = Tensor(-wn * (1 - y))
    terms = mul(pos_coef, log(p)) + mul(neg_coef, log(sub(one, p)))
    return mean(terms)


def bce(probs, labels) -> float:
    """Unweighted binary cross-entropy on plain arrays (float64 reference)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


@dataclass
class MetricCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, n_outputs: int) -> "MetricCounts":
        z = lambda: np.zeros(n_outputs, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(self.tp + other.tp, self.fp + other.fp,
                            self.tn + other.tn, self.fn + other.fn)


def confusion_update(counts: MetricCounts, probs, labels, threshold: float = 0.5) -> MetricCounts:
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if p.shape != y.shape or p.size != counts.tp.size:
        raise ShapeError("confusion_update: probs, labels and counts disagree in width")
    pred = p >= threshold
    return MetricCounts(counts.tp + (pred & y), counts.fp + (pred & ~y),
                        counts.tn + (~pred & ~y), counts.fn + (~pred & y))


@dataclass
class OutputMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: list = field(default_factory=list)  # metric names with a zero denominator

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "degenerate": list(self.degenerate)}


@dataclass
class Metrics:
    per_output: list
    combined_accuracy: float


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics_from_counts(counts: MetricCounts) -> Metrics:
    if np.any(counts.total < 1):
        raise EmptyInputError("metrics need at least one evaluated patient")
    out = []
    for j in range(counts.tp.size):
        tp, fp, tn, fn = (int(a[j]) for a in (counts.tp, counts.fp, counts.tn, counts.fn))
        degenerate = []
        acc = (tp + tn) / (tp + fp + tn + fn)
        prec = _ratio(tp, tp + fp, "precision", degenerate)
        rec = _ratio(tp, tp + fn, "recall", degenerate)
        f1 = _ratio(2 * prec * rec, prec + rec, "f1", degenerate)
        out.append(OutputMetrics(acc, prec, rec, f1, degenerate))
    combined = float(np.mean([m.accuracy for m in out]))
    return Metrics(out, combined)
