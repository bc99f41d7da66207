"""Training loops: single model, MTE co-training, mutual learning, deep ensembles.

All loops share one recipe: SGD with momentum and coupled weight decay,
mini-batches drawn from a per-epoch permutation of the training set, and a
piecewise-constant learning-rate schedule. Every random choice is keyed off
``TrainConfig.seed`` so a run is a deterministic function of its config.

MTE batch step (default ``update_order="sequential"``):

1. auxiliary models predict on the batch (gradient-opaque soft targets);
2. the primary takes one step on CE + alpha * mean KL(aux || primary);
3. the updated primary predicts on the same batch and each auxiliary takes
   one step on KL(primary || aux).

With ``update_order="snapshot"`` step 3 uses the primary's prediction from
before step 2.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics
from .data import LabeledDataset
from .nn import (ModelCheckpoint, ModelSpec, OptState, Schedule, flat_grad, forward_logits,
                 init_params, logits_graph, lr_at_epoch, sgd_step)
from .rng import derive_key, make_rng

METHODS = ("ce", "baseline", "mte", "dml", "de")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ce"
    baseline: L.BaselineLossSpec = field(default_factory=L.BaselineLossSpec)
    alpha: float = 0.8
    n_aux: int = 1
    primary_hidden: tuple[int, ...] = (128, 128)
    aux_hidden: tuple[int, ...] = (64,)
    epochs: int = 60
    batch_size: int = 100
    primary_schedule: Schedule = field(default_factory=Schedule)
    aux_schedule: Schedule = field(default_factory=lambda: Schedule.constant(0.01))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    shuffle_seed: int | None = None
    update_order: str = "sequential"
    eval_bins: int = metrics.DEFAULT_BINS

    def __post_init__(self):
        object.__setattr__(self, "primary_hidden", tuple(int(w) for w in self.primary_hidden))
        object.__setattr__(self, "aux_hidden", tuple(int(w) for w in self.aux_hidden))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.method == "de" and self.n_aux < 2:
            raise ValueError("a deep ensemble needs n_aux >= 2 members")
        if self.n_aux < 1:
            raise ValueError("n_aux must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.update_order not in ("sequential", "snapshot"):
            raise ValueError(f"unknown update_order {self.update_order!r}")

    @property
    def loss_spec(self) -> L.BaselineLossSpec:
        return self.baseline if self.method == "baseline" else L.BaselineLossSpec("ce")

    def primary_spec(self, dim: int, n_classes: int, seed: int | None = None) -> ModelSpec:
        s = self.seed if seed is None else seed
        return ModelSpec((dim, *self.primary_hidden, n_classes), init_seed=derive_key(s, "primary"))

    def aux_spec(self, dim: int, n_classes: int, index: int) -> ModelSpec:
        return ModelSpec((dim, *self.aux_hidden, n_classes), init_seed=derive_key(self.seed, "aux", index))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primary_hidden"] = list(self.primary_hidden)
        d["aux_hidden"] = list(self.aux_hidden)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self):
        return len(self.records)

    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.records:
            cols += [k for k in r if k not in cols]
        return cols

    def to_csv(self) -> str:
        cols = self.columns()
        lines = [",".join(cols)]
        for r in self.records:
            lines.append(",".join(repr(r[c]) if isinstance(r.get(c), float) else str(r.get(c, ""))
                                  for c in cols))
        return "\n".join(lines) + "\n"


# -- plumbing -------------------------------------------------------------

def _check_datasets(train: LabeledDataset, val: LabeledDataset | None) -> None:
    if len(train) == 0:
        raise ValueError("training set is empty")
    if val is not None and (val.n_classes != train.n_classes or val.dim != train.dim):
        raise ValueError("train and validation sets disagree on class count or feature dim")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for b, start in enumerate(range(0, n, batch_size)):
        yield b, perm[start: start + batch_size]


def _probs(ckpt: ModelCheckpoint, x: np.ndarray) -> L.ProbBatch:
    return L.ProbBatch.from_logits(forward_logits(ckpt, x))


def _grad_step(ckpt: ModelCheckpoint, opt: OptState, xb: np.ndarray, build_loss: Callable,
               epoch: int, b: int):
    """Build ``build_loss(log_probs)`` for ``ckpt`` on a fresh tape and take one SGD step."""
    tape = ad.Tape()
    logits, params = logits_graph(tape, ckpt, xb)
    if not np.all(np.isfinite(logits.value)):
        raise TrainingDivergence(epoch, b, "logits are not finite")
    out = build_loss(ad.log_softmax(logits))
    loss, terms = out if isinstance(out, tuple) else (out, None)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingDivergence(epoch, b, f"loss is {value}")
    grads = flat_grad(ad.backward(tape, loss), params)
    try:
        ckpt, opt = sgd_step(ckpt, grads, opt)
    except ValueError as exc:
        raise TrainingDivergence(epoch, b, str(exc)) from exc
    return ckpt, opt, value, terms


def _validate(ckpt_or_probs, val: LabeledDataset | None, bins: int, prefix: str = "") -> dict:
    if val is None or len(val) == 0:
        return {}
    probs = ckpt_or_probs if isinstance(ckpt_or_probs, L.ProbBatch) else _probs(ckpt_or_probs, val.features)
    e, _ = metrics.ece(probs, val.labels, bins)
    return {f"{prefix}val_acc": metrics.accuracy(probs, val.labels), f"{prefix}val_ece": e}


def _meta(cfg: TrainConfig, epoch: int, role: str, terms: Sequence[str]) -> dict:
    return {"config_digest": cfg.digest(), "epoch": epoch, "role": role, "loss_terms": list(terms)}


def _opt(ckpt: ModelCheckpoint, cfg: TrainConfig, schedule: Schedule) -> OptState:
    return OptState.zeros(ckpt.spec.n_params, schedule.initial_lr, cfg.momentum, cfg.weight_decay)


# -- training loops -------------------------------------------------------

def train_single(cfg: TrainConfig, train: LabeledDataset,
                 val: LabeledDataset | None = None) -> tuple[ModelCheckpoint, TrainHistory]:
    if cfg.method not in ("ce", "baseline"):
        raise ValueError(f"train_single expects method ce or baseline, got {cfg.method!r}")
    _check_datasets(train, val)
    t0 = time.perf_counter()
    spec_loss = cfg.loss_spec
    ckpt = init_params(cfg.primary_spec(train.dim, train.n_classes))
    opt = _opt(ckpt, cfg, cfg.primary_schedule)
    rng = make_rng(cfg.seed if cfg.shuffle_seed is None else cfg.shuffle_seed, "shuffle")
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        opt = replace(opt, lr=lr_at_epoch(cfg.primary_schedule, epoch))
        total, count = 0.0, 0
        for b, idx in _batches(len(train), cfg.batch_size, rng):
            xb, yb = train.features[idx], L.LabelBatch(train.labels[idx], train.n_classes)
            fn = lambda logp: L.baseline_loss(spec_loss, logp, yb)
            ckpt, opt, value, _ = _grad_step(ckpt, opt, xb, fn, epoch, b)
            total += value * idx.size
            count += idx.size
        history.records.append({"epoch": epoch, "lr": opt.lr, "loss": total / count,
                                **_validate(ckpt, val, cfg.eval_bins)})
    history.wall_time = time.perf_counter() - t0
    terms = ["ce"] if spec_loss.kind == "ce" else [spec_loss.kind]
    return replace(ckpt, train_meta=_meta(cfg, cfg.epochs, "single", terms)), history


def train_mte(cfg: TrainConfig, train: LabeledDataset, val: LabeledDataset | None = None
              ) -> tuple[ModelCheckpoint, list[ModelCheckpoint], TrainHistory]:
    if cfg.method != "mte":
        raise ValueError(f"train_mte expects method mte, got {cfg.method!r}")
    _check_datasets(train, val)
    t0 = time.perf_counter()
    k, d = train.n_classes, train.dim
    primary = init_params(cfg.primary_spec(d, k))
    p_opt = _opt(primary, cfg, cfg.primary_schedule)
    auxes = [init_params(cfg.aux_spec(d, k, i)) for i in range(cfg.n_aux)]
    a_opts = [_opt(a, cfg, cfg.aux_schedule) for a in auxes]
    rng = make_rng(cfg.seed if cfg.shuffle_seed is None else cfg.shuffle_seed, "shuffle")
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        p_opt = replace(p_opt, lr=lr_at_epoch(cfg.primary_schedule, epoch))
        a_lr = lr_at_epoch(cfg.aux_schedule, epoch)
        a_opts = [replace(o, lr=a_lr) for o in a_opts]
        sums = {"primary_ce": 0.0, "primary_kl": 0.0, "primary_loss": 0.0}
        sums.update({f"aux{i}_kl": 0.0 for i in range(cfg.n_aux)})
        count = 0
        for b, idx in _batches(len(train), cfg.batch_size, rng):
            xb, yb = train.features[idx], L.LabelBatch(train.labels[idx], k)
            aux_probs = [_probs(a, xb) for a in auxes]
            before = _probs(primary, xb) if cfg.update_order == "snapshot" else None
            fn = lambda logp: L.mte_primary_loss(logp, aux_probs, yb, cfg.alpha, return_terms=True)
            primary, p_opt, value, terms = _grad_step(primary, p_opt, xb, fn, epoch, b)
            targets = before if before is not None else _probs(primary, xb)
            w = idx.size
            sums["primary_loss"] += value * w
            sums["primary_ce"] += terms["ce"] * w
            sums["primary_kl"] += terms["kl"] * w
            for i in range(cfg.n_aux):
                fn = lambda logp: L.mte_auxiliary_loss(targets, logp)
                auxes[i], a_opts[i], value, _ = _grad_step(auxes[i], a_opts[i], xb, fn, epoch, b)
                sums[f"aux{i}_kl"] += value * w
            count += w
        rec = {"epoch": epoch, "lr": p_opt.lr, "aux_lr": a_lr}
        rec.update({key: v / count for key, v in sums.items()})
        rec.update(_validate(primary, val, cfg.eval_bins))
        history.records.append(rec)
    history.wall_time = time.perf_counter() - t0
    primary = replace(primary, train_meta=_meta(cfg, cfg.epochs, "primary", ["ce", "kl"]))
    auxes = [replace(a, train_meta=_meta(cfg, cfg.epochs, f"aux{i}", ["kl"])) for i, a in enumerate(auxes)]
    return primary, auxes, history


def train_dml(cfg: TrainConfig, train: LabeledDataset, val: LabeledDataset | None = None
              ) -> tuple[tuple[ModelCheckpoint, ModelCheckpoint], TrainHistory]:
    """Two peers with the primary architecture; peer ``j`` is initialised from
    seed ``cfg.seed + j`` and both see the batch order of ``cfg.seed``.

    Within a batch both peers step against each other's pre-update prediction.
    """
    if cfg.method != "dml":
        raise ValueError(f"train_dml expects method dml, got {cfg.method!r}")
    _check_datasets(train, val)
    t0 = time.perf_counter()
    k, d = train.n_classes, train.dim
    peers = [init_params(cfg.primary_spec(d, k, cfg.seed + j)) for j in range(2)]
    opts = [_opt(p, cfg, cfg.primary_schedule) for p in peers]
    rng = make_rng(cfg.seed if cfg.shuffle_seed is None else cfg.shuffle_seed, "shuffle")
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.primary_schedule, epoch)
        opts = [replace(o, lr=lr) for o in opts]
        sums = {f"{n}_{t}": 0.0 for n in ("a", "b") for t in ("ce", "kl", "loss")}
        count = 0
        for b, idx in _batches(len(train), cfg.batch_size, rng):
            xb, yb = train.features[idx], L.LabelBatch(train.labels[idx], k)
            probs = [_probs(p, xb) for p in peers]
            for j, name in enumerate(("a", "b")):
                peer = probs[1 - j]
                fn = lambda logp: L.dml_loss(logp, peer, yb, cfg.alpha, return_terms=True)
                peers[j], opts[j], value, terms = _grad_step(peers[j], opts[j], xb, fn, epoch, b)
                sums[f"{name}_loss"] += value * idx.size
                sums[f"{name}_ce"] += terms["ce"] * idx.size
                sums[f"{name}_kl"] += terms["kl"] * idx.size
            count += idx.size
        rec = {"epoch": epoch, "lr": lr, **{key: v / count for key, v in sums.items()}}
        rec.update(_validate(peers[0], val, cfg.eval_bins))
        history.records.append(rec)
    history.wall_time = time.perf_counter() - t0
    a, b_ = (replace(p, train_meta=_meta(cfg, cfg.epochs, f"peer{j}", ["ce", "kl"])) for j, p in enumerate(peers))
    return (a, b_), history


def train_deep_ensemble(cfg: TrainConfig, train: LabeledDataset, val: LabeledDataset | None = None
                        ) -> tuple[list[ModelCheckpoint], list[TrainHistory]]:
    """``cfg.n_aux`` independent CE models with seeds seed, seed+1, ..."""
    if cfg.method != "de" or cfg.n_aux < 2:
        raise ValueError("train_deep_ensemble expects method de with n_aux >= 2")
    members, histories = [], []
    for j in range(cfg.n_aux):
        member_cfg = replace(cfg, method="ce", seed=cfg.seed + j, shuffle_seed=None)
        ckpt, hist = train_single(member_cfg, train, val)
        members.append(replace(ckpt, train_meta={**ckpt.train_meta, "role": f"member{j}"}))
        histories.append(hist)
    return members, histories


def predict(ckpts, x: np.ndarray, mode: str = "primary", weights=None) -> L.ProbBatch:
    """Class probabilities.

    ``mode="primary"`` evaluates only the first checkpoint (auxiliaries are
    training-time only). ``mode="ensemble"`` averages every checkpoint's
    softmax with ``weights`` (uniform by default).
    """
    if isinstance(ckpts, ModelCheckpoint):
        ckpts = [ckpts]
    ckpts = list(ckpts)
    if not ckpts:
        raise ValueError("no checkpoints to predict with")
    if mode == "primary":
        if weights is not None:
            raise ValueError("weights are only meaningful in ensemble mode")
        return _probs(ckpts[0], x)
    if mode != "ensemble":
        raise ValueError(f"unknown prediction mode {mode!r}")
    if weights is not None and len(weights) != len(ckpts):
        raise ValueError(f"{len(weights)} weights for {len(ckpts)} checkpoints")
    return L.ensemble_probs([_probs(c, x) for c in ckpts], weights)


@dataclass
class TrainResult:
    """Outcome of :func:`train`: the checkpoints used at inference plus extras."""

    method: str
    inference: list[ModelCheckpoint]
    mode: str
    extra: list[ModelCheckpoint]
    histories: list[TrainHistory]

    def predict(self, x: np.ndarray) -> L.ProbBatch:
        return predict(self.inference, x, self.mode)


def train(cfg: TrainConfig, train_ds: LabeledDataset, val: LabeledDataset | None = None) -> TrainResult:
    if cfg.method in ("ce", "baseline"):
        ckpt, hist = train_single(cfg, train_ds, val)
        return TrainResult(cfg.method, [ckpt], "primary", [], [hist])
    if cfg.method == "mte":
        primary, auxes, hist = train_mte(cfg, train_ds, val)
        return TrainResult("mte", [primary], "primary", auxes, [hist])
    if cfg.method == "dml":
        (a, b), hist = train_dml(cfg, train_ds, val)
        return TrainResult("dml", [a], "primary", [b], [hist])
    members, hists = train_deep_ensemble(cfg, train_ds, val)
    return TrainResult("de", members, "ensemble", [], hists)
