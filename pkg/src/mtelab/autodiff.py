"""Minimal reverse-mode autodiff over dense float64 arrays.

Graphs are recorded define-by-run on a :class:`Tape`: every operation
evaluates eagerly and appends a :class:`Node`. The recorded graph can be
replayed with new parameter values (:func:`forward`), differentiated
(:func:`backward`) and checked against central finite differences
(:func:`check_gradients_fd`).

``detach`` produces a node whose value equals its parent's but which is a
constant as far as :func:`backward` is concerned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Node",
    "Tape",
    "forward",
    "backward",
    "detach",
    "check_gradients_fd",
    "log_softmax",
    "softmax",
]

LEAF_OPS = ("constant", "parameter")


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    def __init__(self, node_id: int, msg: str):
        super().__init__(f"node {node_id}: {msg}")
        self.node_id = node_id


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("non-finite input value")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    return zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))


def _sum_fwd(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_bwd(g, x, out, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


def _mean_bwd(g, x, out, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape) / n,)


def _pow_bwd(g, x, out, exponent):
    if exponent == 0:
        return (np.zeros_like(x),)
    # x == 0 with exponent < 1 has an unbounded slope; treat it as flat.
    with np.errstate(divide="ignore", invalid="ignore"):
        d = exponent * np.power(x, exponent - 1)
    d = np.where(np.isfinite(d), d, 0.0)
    return (g * d,)


def _log_softmax_bwd(g, z, out, axis=-1):
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


@dataclass(frozen=True)
class _Op:
    fwd: Callable
    bwd: Callable | None


# bwd(grad_out, *parent_values, out_value, **attrs) -> tuple of parent grads
_OPS: dict[str, _Op] = {
    "add": _Op(np.add, lambda g, a, b, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": _Op(np.subtract, lambda g, a, b, out: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": _Op(np.multiply, lambda g, a, b, out: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "neg": _Op(np.negative, lambda g, a, out: (-g,)),
    "matmul": _Op(np.matmul, lambda g, a, b, out: (g @ b.T, a.T @ g)),
    "relu": _Op(lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),)),
    "exp": _Op(np.exp, lambda g, x, out: (g * out,)),
    "log": _Op(np.log, lambda g, x, out: (g / x,)),
    "pow": _Op(lambda x, exponent: np.power(x, exponent), _pow_bwd),
    "sum": _Op(_sum_fwd, _sum_bwd),
    "mean": _Op(_mean_fwd, _mean_bwd),
    "log_softmax": _Op(lambda z, axis=-1: z - _logsumexp(z, axis), _log_softmax_bwd),
    "clip": _Op(lambda x, lo, hi: np.clip(x, lo, hi),
                lambda g, x, out, lo, hi: (g * ((x >= lo) & (x <= hi)),)),
    "detach": _Op(lambda x: x.copy(), None),
}


class Node:
    """One value in a recorded graph."""

    __slots__ = ("tape", "id", "op", "parents", "attrs", "value", "name")

    def __init__(self, tape: "Tape", op: str, parents: tuple[int, ...], value: np.ndarray,
                 attrs: dict | None = None, name: str | None = None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _wrap(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise AutodiffError("nodes belong to different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._wrap(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._wrap(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._wrap(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._wrap(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._wrap(other), self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._wrap(other))

    def __pow__(self, exponent: float):
        return self.tape.apply("pow", self, exponent=float(exponent))

    def relu(self):
        return self.tape.apply("relu", self)

    def exp(self):
        return self.tape.apply("exp", self)

    def log(self):
        return self.tape.apply("log", self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)

    def clip(self, lo: float, hi: float):
        return self.tape.apply("clip", self, lo=float(lo), hi=float(hi))

    def detach(self):
        return self.tape.apply("detach", self)


class Tape:
    """Topologically ordered record of a computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def parameter(self, value, name: str | None = None) -> Node:
        node = Node(self, "parameter", (), _as_array(value), name=name)
        self.nodes.append(node)
        self.param_ids.append(node.id)
        return node

    def constant(self, value, name: str | None = None) -> Node:
        node = Node(self, "constant", (), _as_array(value), name=name)
        self.nodes.append(node)
        return node

    def apply(self, op: str, *parents: Node, **attrs) -> Node:
        if op not in _OPS:
            raise AutodiffError(f"unknown op {op!r}")
        node_id = len(self.nodes)
        value = _evaluate(node_id, op, [p.value for p in parents], attrs)
        node = Node(self, op, tuple(p.id for p in parents), value, attrs)
        self.nodes.append(node)
        return node


def _evaluate(node_id: int, op: str, inputs: list[np.ndarray], attrs: dict) -> np.ndarray:
    if op == "matmul":
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(node_id, f"matmul of {a.shape} and {b.shape}")
    try:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.asarray(_OPS[op].fwd(*inputs, **attrs), dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(node_id, str(exc)) from exc


def detach(node: Node) -> Node:
    return node.detach()


def log_softmax(z: Node, axis: int = -1) -> Node:
    return z.tape.apply("log_softmax", z, axis=axis)


def softmax(z: Node, axis: int = -1) -> Node:
    return log_softmax(z, axis).exp()


def forward(tape: Tape, bindings: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Replay ``tape`` and return the value of every node.

    ``bindings`` maps leaf node ids (parameters or constants) to new values;
    unbound leaves keep their recorded values. The tape itself is not
    modified.
    """
    bindings = bindings or {}
    values: dict[int, np.ndarray] = {}
    for node in tape.nodes:
        if node.op in LEAF_OPS:
            if node.id in bindings:
                value = _as_array(bindings[node.id])
                if value.shape != node.shape:
                    raise ShapeError(node.id, f"bound shape {value.shape} != {node.shape}")
            else:
                value = node.value
        else:
            value = _evaluate(node.id, node.op, [values[p] for p in node.parents], node.attrs)
        values[node.id] = value
    for nid in bindings:
        if nid >= len(tape.nodes) or tape.nodes[nid].op not in LEAF_OPS:
            raise AutodiffError(f"binding for non-leaf node {nid}")
    return values


def backward(tape: Tape, seed: Node | int,
             values: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``seed`` node with respect to every parameter.

    Gradients stop at detach nodes. Parameters the seed does not depend on
    get a zero array.
    """
    seed_id = seed.id if isinstance(seed, Node) else int(seed)
    val = (lambda nid: values[nid]) if values is not None else (lambda nid: tape.nodes[nid].value)
    if val(seed_id).size != 1:
        raise AutodiffError(f"seed node {seed_id} is not scalar (shape {val(seed_id).shape})")

    grads: dict[int, np.ndarray] = {seed_id: np.ones_like(val(seed_id))}
    for node in reversed(tape.nodes[: seed_id + 1]):
        g = grads.pop(node.id, None) if node.op not in LEAF_OPS else grads.get(node.id)
        if g is None or node.op in LEAF_OPS or node.op == "detach":
            continue
        parent_vals = [val(p) for p in node.parents]
        pgrads = _OPS[node.op].bwd(g, *parent_vals, val(node.id), **node.attrs)
        for pid, pg in zip(node.parents, pgrads):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return {pid: grads.get(pid, np.zeros_like(val(pid))) for pid in tape.param_ids}


def check_gradients_fd(tape: Tape, seed: Node | int, step: float = 1e-6) -> float:
    """Largest ``|analytic - fd| / max(1, |analytic|)`` over all parameter coordinates.

    ``fd`` is the central difference ``(f(p + h) - f(p - h)) / 2h`` obtained by
    replaying the tape.
    """
    if step <= 0:
        raise AutodiffError("step must be positive")
    seed_id = seed.id if isinstance(seed, Node) else int(seed)
    analytic = backward(tape, seed_id)
    worst = 0.0
    for pid in tape.param_ids:
        base = tape.nodes[pid].value
        flat = base.ravel()
        grad = analytic[pid].ravel()
        for i in range(flat.size):
            evals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * step
                f = float(forward(tape, {pid: bumped.reshape(base.shape)})[seed_id].ravel()[0])
                if not np.isfinite(f):
                    raise AutodiffError(f"non-finite loss perturbing node {pid} coordinate {i}")
                evals.append(f)
            fd = (evals[0] - evals[1]) / (2 * step)
            worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(grad[i])))
    return worst
