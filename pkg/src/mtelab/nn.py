"""Feed-forward ReLU classifiers, checkpoint persistence and SGD with momentum."""

from __future__ import annotations

import base64
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .rng import make_rng

FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ModelError("a model needs at least an input and an output width")
        if any(w <= 0 for w in self.layer_widths):
            raise ModelError(f"layer widths must be positive, got {list(self.layer_widths)}")
        if self.activation != "relu":
            raise ModelError(f"unsupported activation {self.activation!r}")

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "relu"), int(d.get("init_seed", 0)))


@dataclass(frozen=True)
class ModelCheckpoint:
    spec: ModelSpec
    params: np.ndarray
    format_version: int = FORMAT_VERSION
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (self.spec.n_params,):
            raise ModelError(f"expected {self.spec.n_params} parameters, got shape {params.shape}")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views per layer; weights are (fan_in, fan_out)."""
        out, offset = [], 0
        w = self.spec.layer_widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            W = self.params[offset: offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.params[offset: offset + fan_out]
            offset += fan_out
            out.append((W, b))
        return out


def init_params(spec: ModelSpec) -> ModelCheckpoint:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = make_rng(spec.init_seed, "init")
    chunks = []
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        bound = math.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelCheckpoint(spec, np.concatenate(chunks))


def _check_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ModelError(f"batch of shape {x.shape} does not match input width {spec.layer_widths[0]}")
    return x


def forward_logits(ckpt: ModelCheckpoint, x: np.ndarray) -> np.ndarray:
    h = _check_batch(ckpt.spec, x)
    layers = ckpt.layers()
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def logits_graph(tape: ad.Tape, ckpt: ModelCheckpoint, x) -> tuple[ad.Node, list[ad.Node]]:
    """Record the forward pass on ``tape``.

    Returns the logits node and the per-layer parameter nodes in flat-array
    order (W0, b0, W1, b1, ...); pass the latter to :func:`flat_grad`.
    """
    xn = x if isinstance(x, ad.Node) else tape.constant(_check_batch(ckpt.spec, x))
    params = []
    layers = ckpt.layers()
    h = xn
    for i, (W, b) in enumerate(layers):
        Wn, bn = tape.parameter(W), tape.parameter(b)
        params += [Wn, bn]
        h = h @ Wn + bn
        if i < len(layers) - 1:
            h = h.relu()
    return h, params


def flat_grad(grads: dict[int, np.ndarray], param_nodes: list[ad.Node]) -> np.ndarray:
    return np.concatenate([grads[p.id].ravel() for p in param_nodes])


# -- persistence ----------------------------------------------------------

def checkpoint_to_dict(ckpt: ModelCheckpoint) -> dict:
    raw = ckpt.params.astype("<f8").tobytes()
    return {
        "format_version": ckpt.format_version,
        "spec": ckpt.spec.to_dict(),
        "params": {"encoding": "base64-f64le", "length": int(ckpt.params.size),
                   "data": base64.b64encode(raw).decode("ascii")},
        "train_meta": ckpt.train_meta,
    }


def checkpoint_from_dict(d: dict) -> ModelCheckpoint:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint format version {version!r}")
    p = d["params"]
    if p.get("encoding") == "base64-f64le":
        params = np.frombuffer(base64.b64decode(p["data"]), dtype="<f8").astype(np.float64)
    elif p.get("encoding") == "decimal":
        params = np.array([float(v) for v in p["data"]], dtype=np.float64)
    else:
        raise ModelError(f"unknown parameter encoding {p.get('encoding')!r}")
    if params.size != p.get("length", params.size):
        raise ModelError("parameter length does not match header")
    return ModelCheckpoint(ModelSpec.from_dict(d["spec"]), params, version, d.get("train_meta", {}))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    atomic_write_text(path, json.dumps(checkpoint_to_dict(ckpt), indent=1, sort_keys=True))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))


# -- optimisation ---------------------------------------------------------

@dataclass(frozen=True)
class OptState:
    buf: np.ndarray
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.lr < 0:
            raise ModelError("learning rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ModelError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ModelError("weight decay must be nonnegative")

    @classmethod
    def zeros(cls, n: int, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> "OptState":
        return cls(np.zeros(n), lr, momentum, weight_decay)


def sgd_step(ckpt: ModelCheckpoint, grads: np.ndarray, opt: OptState) -> tuple[ModelCheckpoint, OptState]:
    """One SGD-momentum step with coupled weight decay.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != ckpt.params.shape or opt.buf.shape != ckpt.params.shape:
        raise ModelError(f"gradient/buffer shapes {grads.shape}, {opt.buf.shape} "
                         f"do not match {ckpt.params.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise ModelError(f"non-finite gradient at {idx.size} coordinates (first: {idx[:5].tolist()})")
    buf = opt.momentum * opt.buf + (grads + opt.weight_decay * ckpt.params)
    params = ckpt.params - opt.lr * buf
    return replace(ckpt, params=params), replace(opt, buf=buf)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate.

    The initial rate is held for ``warm_epochs``; after that it is multiplied
    by ``decay_factor`` at the start of every ``decay_interval`` epochs.
    ``decay_interval = 0`` or ``decay_factor = 1`` gives a constant rate.
    """

    initial_lr: float = 0.1
    warm_epochs: int = 30
    decay_interval: int = 10
    decay_factor: float = 0.5

    @classmethod
    def constant(cls, lr: float) -> "Schedule":
        return cls(lr, 0, 0, 1.0)

    def to_dict(self) -> dict:
        return {"initial_lr": self.initial_lr, "warm_epochs": self.warm_epochs,
                "decay_interval": self.decay_interval, "decay_factor": self.decay_factor}


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ModelError("epoch must be nonnegative")
    if epoch < schedule.warm_epochs or schedule.decay_interval <= 0 or schedule.decay_factor == 1.0:
        return schedule.initial_lr
    n_decays = (epoch - schedule.warm_epochs) // schedule.decay_interval + 1
    return schedule.initial_lr * schedule.decay_factor ** n_decays
