"""Training objectives.

Every loss takes log-probabilities as graph nodes (output of
:func:`mtelab.autodiff.log_softmax`) and returns a scalar node averaged over
the batch. Arguments documented as gradient-opaque are detached inside the
loss, so callers cannot accidentally leak gradient into the wrong model.
Plain arrays are accepted anywhere a node is and are wrapped as constants on
a fresh tape, which is convenient for evaluating a loss value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

PROB_FLOOR = 1e-12
ROW_TOL = 1e-9


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ProbBatch:
    """Row-stochastic B x K matrix of predicted class probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise LossError(f"probabilities must be B x K, got shape {p.shape}")
        if np.any(p < 0) or np.any(p > 1 + ROW_TOL) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=ROW_TOL):
            raise LossError("probability rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "ProbBatch":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return cls(e / e.sum(axis=1, keepdims=True))

    def __len__(self):
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        # argmax returns the lowest index among ties
        return self.probs.argmax(axis=1)


@dataclass(frozen=True)
class LabelBatch:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        y = np.asarray(self.labels)
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise LossError("labels must be a 1-d integer array")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise LossError(f"labels must lie in [0, {self.n_classes - 1}]")
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.labels.size

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.labels.size, self.n_classes))
        out[np.arange(self.labels.size), self.labels] = 1.0
        return out


@dataclass(frozen=True)
class BaselineLossSpec:
    kind: str = "ce"
    param: float = 0.0

    KINDS = ("ce", "focal", "label-smoothing", "entropy-reg")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise LossError(f"unknown baseline loss {self.kind!r}; expected one of {self.KINDS}")
        if not np.isfinite(self.param) or self.param < 0:
            raise LossError(f"{self.kind} parameter must be finite and >= 0, got {self.param}")
        if self.kind == "label-smoothing" and self.param >= 1:
            raise LossError("label smoothing epsilon must be < 1")


def _node(x, tape: ad.Tape | None = None) -> ad.Node:
    if isinstance(x, ad.Node):
        return x
    return (tape or ad.Tape()).constant(x)


def _probs(p, tape: ad.Tape, detach: bool) -> ad.Node | np.ndarray:
    """Normalise a distribution argument to a node (detached if asked) or an array."""
    if isinstance(p, ad.Node):
        if p.tape is not tape:
            raise LossError("distribution and log-probabilities live on different tapes")
        return p.detach() if detach else p
    if isinstance(p, ProbBatch):
        return p.probs
    return ProbBatch(p).probs


def _labels(labels, n_classes: int) -> LabelBatch:
    if isinstance(labels, LabelBatch):
        if labels.n_classes != n_classes:
            raise LossError(f"labels are for {labels.n_classes} classes, model has {n_classes}")
        return labels
    return LabelBatch(np.asarray(labels), n_classes)


def _check_logp(logp: ad.Node) -> None:
    if logp.value.ndim != 2:
        raise LossError(f"log-probabilities must be B x K, got shape {logp.shape}")
    lse = np.logaddexp.reduce(logp.value, axis=1)
    if not np.allclose(lse, 0.0, rtol=0, atol=ROW_TOL):
        raise LossError("rows of logp are not normalised log-probabilities")


def soft_cross_entropy(target: np.ndarray, logp: ad.Node) -> ad.Node:
    """Mean over rows of -sum_k target_k * logp_k; ``target`` is constant."""
    return -(logp * target).sum(axis=1).mean()


def cross_entropy(logp, labels) -> ad.Node:
    logp = _node(logp)
    _check_logp(logp)
    y = _labels(labels, logp.shape[1])
    if len(y) != logp.shape[0]:
        raise LossError(f"{len(y)} labels for {logp.shape[0]} rows")
    return soft_cross_entropy(y.one_hot, logp)


def kl_divergence(p, logq) -> ad.Node:
    """Mean over rows of KL(p || q) = sum_k p_k (log p_k - log q_k).

    ``p`` may be a live node (gradient flows through it), an array or a
    :class:`ProbBatch`. Zero entries of an array ``p`` contribute exactly 0.
    """
    logq = _node(logq)
    tape = logq.tape
    p = _probs(p, tape, detach=False)
    if p.shape != logq.shape:
        raise LossError(f"shape mismatch: p {p.shape} vs logq {logq.shape}")
    if isinstance(p, ad.Node):
        logp = p.clip(PROB_FLOOR, 1.0).log()
        return (p * (logp - logq)).sum(axis=1).mean()
    neg_entropy = np.where(p > 0, p * np.log(np.clip(p, PROB_FLOOR, 1.0)), 0.0).sum(axis=1)
    return (tape.constant(neg_entropy) - (logq * p).sum(axis=1)).mean()


def mte_primary_loss(f_logp, aux_probs: Sequence, labels, alpha: float, return_terms: bool = False):
    """Primary objective: CE(f, y) + alpha * mean_i KL(g_i || f).

    Auxiliary distributions are detached, so the gradient reaches only the
    primary model. With ``return_terms`` the result is ``(loss, terms)`` where
    ``terms`` holds the value of each additive component.
    """
    if len(aux_probs) == 0:
        raise LossError("MTE needs at least one auxiliary model")
    if alpha < 0:
        raise LossError("alpha must be >= 0")
    f_logp = _node(f_logp)
    ce = cross_entropy(f_logp, labels)
    kls = [kl_divergence(_probs(g, f_logp.tape, detach=True), f_logp) for g in aux_probs]
    kl = kls[0]
    for term in kls[1:]:
        kl = kl + term
    if len(kls) > 1:
        kl = kl * (1.0 / len(kls))
    loss = ce + kl * float(alpha)
    if return_terms:
        return loss, {"ce": float(ce.value), "kl": float(kl.value)}
    return loss


def mte_auxiliary_loss(f_probs, g_logp, return_terms: bool = False):
    """Auxiliary objective: KL(f || g) with the primary output detached. No CE term."""
    g_logp = _node(g_logp)
    loss = kl_divergence(_probs(f_probs, g_logp.tape, detach=True), g_logp)
    if return_terms:
        return loss, {"kl": float(loss.value)}
    return loss


def dml_loss(own_logp, peer_probs, labels, alpha: float, return_terms: bool = False):
    """Mutual-learning objective for one of two peers: CE(own, y) + alpha * KL(peer || own)."""
    if alpha < 0:
        raise LossError("alpha must be >= 0")
    own_logp = _node(own_logp)
    ce = cross_entropy(own_logp, labels)
    kl = kl_divergence(_probs(peer_probs, own_logp.tape, detach=True), own_logp)
    loss = ce + kl * float(alpha)
    if return_terms:
        return loss, {"ce": float(ce.value), "kl": float(kl.value)}
    return loss


def baseline_loss(spec: BaselineLossSpec, logp, labels) -> ad.Node:
    logp = _node(logp)
    ce = cross_entropy(logp, labels)
    y = _labels(labels, logp.shape[1])
    if spec.kind == "ce":
        return ce
    if spec.kind == "focal":
        logp_y = (logp * y.one_hot).sum(axis=1)
        weight = (1.0 - logp_y.exp()).clip(0.0, 1.0) ** spec.param
        return -(weight * logp_y).mean()
    if spec.kind == "label-smoothing":
        eps = spec.param
        return soft_cross_entropy((1.0 - eps) * y.one_hot + eps / y.n_classes, logp)
    # entropy-reg: CE - weight * H(p)
    entropy = -(logp.exp() * logp).sum(axis=1).mean()
    return ce - entropy * spec.param


def ensemble_probs(prob_list: Sequence, weights: Sequence[float] | None = None) -> ProbBatch:
    """Convex combination of member distributions; uniform weights by default."""
    if not prob_list:
        raise LossError("ensemble needs at least one member")
    mats = [p.probs if isinstance(p, ProbBatch) else ProbBatch(p).probs for p in prob_list]
    if any(m.shape != mats[0].shape for m in mats):
        raise LossError("ensemble members have different shapes")
    if weights is None:
        weights = np.full(len(mats), 1.0 / len(mats))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(mats),):
        raise LossError(f"{w.size} weights for {len(mats)} members")
    if np.any(w < 0) or abs(w.sum() - 1.0) > ROW_TOL:
        raise LossError(f"weights must be nonnegative and sum to 1, got {w.tolist()}")
    out = np.zeros_like(mats[0])
    for wi, m in zip(w, mats):
        if wi != 0:
            out += wi * m
    return ProbBatch(out)
