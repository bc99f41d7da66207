"""Calibration and detection metrics.

Confidence bins are equal-width on [0, 1]: bin ``i`` (0-based) covers
``(i/M, (i+1)/M]`` and the first bin also includes 0.

Detection scores are "higher means positive". For misclassification
detection the positives are correctly classified samples; for OOD detection
they are in-distribution samples. FPR-95 is read off the ROC without
interpolation at the largest threshold whose TPR reaches 0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from fractions import Fraction

import numpy as np

from .losses import LabelBatch, ProbBatch

DEFAULT_BINS = 15
TPR_TARGET = 0.95
MISS_RATE = 0.05  # 1 - TPR_TARGET, kept exact


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BinStats:
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    # exact per-bin sums of hits and confidences, when known
    exact_sums: tuple | None = field(default=None, compare=False, repr=False)

    @property
    def m(self) -> int:
        return self.counts.size

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.accuracy - self.confidence)

    def rows(self) -> list[dict]:
        """Plot-ready per-bin rows (empty bins report accuracy = confidence = 0)."""
        m = self.m
        return [
            {"bin": i, "lower": i / m, "upper": (i + 1) / m, "count": int(self.counts[i]),
             "accuracy": float(self.accuracy[i]), "confidence": float(self.confidence[i]),
             "gap": float(self.gap[i])}
            for i in range(m)
        ]


@dataclass(frozen=True)
class ClasswiseBinStats:
    counts: np.ndarray  # K x M
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class DetectionReport:
    fpr95: float
    d_error: float
    auroc: float
    aupr: float
    positive: str = "positive"

    def to_dict(self) -> dict:
        return asdict(self)


def bin_index(values: np.ndarray, m: int) -> np.ndarray:
    idx = np.ceil(np.asarray(values, dtype=np.float64) * m).astype(np.int64) - 1
    return np.clip(idx, 0, m - 1)


def _inputs(probs, labels) -> tuple[ProbBatch, LabelBatch]:
    if not isinstance(probs, ProbBatch):
        probs = ProbBatch(probs)
    if not isinstance(labels, LabelBatch):
        labels = LabelBatch(np.asarray(labels), probs.n_classes)
    if len(probs) == 0:
        raise MetricError("cannot compute calibration on an empty dataset")
    if len(labels) != len(probs):
        raise MetricError(f"{len(labels)} labels for {len(probs)} predictions")
    return probs, labels


def _check_m(m: int) -> None:
    if m < 1:
        raise MetricError("number of bins must be >= 1")


def _bin(values: np.ndarray, hits: np.ndarray, m: int):
    idx = bin_index(values, m)
    counts = np.bincount(idx, minlength=m)
    hit_sum = np.bincount(idx, weights=hits.astype(np.float64), minlength=m)
    val_sum = np.bincount(idx, weights=values, minlength=m)
    safe = np.maximum(counts, 1)
    return counts, hit_sum / safe, val_sum / safe, _exact_sums(idx, hits, values, m)


def _exact_sums(idx, hits, values, m) -> tuple:
    """Per-bin (hit count, confidence sum) with the confidence sum kept as an
    exact rational, so the calibration gap is rounded only once."""
    sums = [Fraction(0)] * m
    for i, v in zip(idx.tolist(), values.tolist()):
        sums[i] += Fraction(v)
    hit_counts = np.bincount(idx, weights=hits.astype(np.float64), minlength=m).astype(np.int64)
    return tuple(zip(hit_counts.tolist(), sums))


def _gap_total(exact_sums) -> Fraction:
    return sum((abs(h - c) for h, c in exact_sums), Fraction(0))


def ece_from_bins(stats: BinStats) -> float:
    """Sum_i |B_i|/N * |A_i - C_i|, i.e. Sum_i |hits_i - conf_sum_i| / N."""
    if stats.exact_sums is not None:
        return float(_gap_total(stats.exact_sums) / stats.n)
    return float(np.sum(stats.counts / stats.n * stats.gap))


def reliability_diagram(probs, labels, m: int = DEFAULT_BINS) -> BinStats:
    probs, labels = _inputs(probs, labels)
    _check_m(m)
    correct = probs.predicted == labels.labels
    return BinStats(*_bin(probs.confidence, correct, m))


def ece(probs, labels, m: int = DEFAULT_BINS) -> tuple[float, BinStats]:
    stats = reliability_diagram(probs, labels, m)
    return ece_from_bins(stats), stats


def classwise_ece(probs, labels, m: int = DEFAULT_BINS) -> tuple[float, ClasswiseBinStats]:
    probs, labels = _inputs(probs, labels)
    _check_m(m)
    k = probs.n_classes
    n = len(probs)
    counts, acc, conf = [], [], []
    total = Fraction(0)
    for c in range(k):
        cnt, a, cf, exact = _bin(probs.probs[:, c], labels.labels == c, m)
        counts.append(cnt)
        acc.append(a)
        conf.append(cf)
        total += _gap_total(exact)
    stats = ClasswiseBinStats(np.array(counts), np.array(acc), np.array(conf))
    return float(total / (n * k)), stats


@dataclass(frozen=True)
class ConfidenceHistogram:
    counts: np.ndarray
    mean_confidence: float
    accuracy: float | None

    def rows(self) -> list[dict]:
        m = self.counts.size
        return [{"bin": i, "lower": i / m, "upper": (i + 1) / m, "count": int(c)}
                for i, c in enumerate(self.counts)]


def confidence_histogram(probs, m: int = DEFAULT_BINS, labels=None) -> ConfidenceHistogram:
    """Counts of max-probability over ``m`` bins plus the two summary lines
    of a confidence histogram (mean confidence, and accuracy when labels are
    given)."""
    if not isinstance(probs, ProbBatch):
        probs = ProbBatch(probs)
    if len(probs) == 0:
        raise MetricError("cannot compute a histogram of an empty dataset")
    _check_m(m)
    conf = probs.confidence
    counts = np.bincount(bin_index(conf, m), minlength=m)
    acc = None
    if labels is not None:
        _, lb = _inputs(probs, labels)
        acc = float(np.mean(probs.predicted == lb.labels))
    return ConfidenceHistogram(counts, float(conf.mean()), acc)


def accuracy(probs, labels) -> float:
    probs, labels = _inputs(probs, labels)
    return float(np.mean(probs.predicted == labels.labels))


# -- detection ------------------------------------------------------------

def _scores(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricError("detection metrics need at least one positive and one negative score")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise MetricError("detection scores must be finite")
    return pos, neg


def roc_points(pos, neg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, tpr, fpr) for the rule ``score >= t``, sweeping unique
    scores in descending order; a leading (0, 0) point has threshold +inf."""
    pos, neg = _scores(pos, neg)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    thresholds = np.r_[np.inf, scores[last]]
    tpr = np.r_[0.0, tp[last] / pos.size]
    fpr = np.r_[0.0, fp[last] / neg.size]
    return thresholds, tpr, fpr


def detection_metrics(pos, neg, positive: str = "positive") -> DetectionReport:
    pos, neg = _scores(pos, neg)
    _, tpr, fpr = roc_points(pos, neg)
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    fpr95 = float(fpr[np.argmax(tpr >= TPR_TARGET)])
    d_error = 0.5 * MISS_RATE + 0.5 * fpr95

    # step-wise precision-recall integration: sum over thresholds of
    # (recall_i - recall_{i-1}) * precision_i
    tp = tpr[1:] * pos.size
    fp = fpr[1:] * neg.size
    precision = tp / (tp + fp)
    aupr = float(np.sum(np.diff(tpr) * precision))
    return DetectionReport(fpr95, d_error, auroc, aupr, positive)


def auroc_bruteforce(pos, neg) -> float:
    """Pairwise-comparison AUROC: P(pos > neg) + 0.5 P(pos == neg)."""
    pos, neg = _scores(pos, neg)
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (pos.size * neg.size))


def misclassification_scores(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Max-softmax scores split into (correct, wrong) samples."""
    probs, labels = _inputs(probs, labels)
    correct = probs.predicted == labels.labels
    return probs.confidence[correct], probs.confidence[~correct]
