"""Dense array computation with reverse-mode automatic differentiation.

Every operation appends a node to a :class:`Tape`; :meth:`Tape.backward`
walks the nodes in reverse creation order (which is a valid reverse
topological order) and accumulates gradients over fan-out.

Values are numpy arrays. Operations are written for matrices but accept
leading batch axes, so a batch of samples is a stack of matrices and weight
gradients are reduced over the batch in a fixed order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    __slots__ = ("tape", "value", "parents", "backward_fn", "op", "name", "needs_grad")

    def __init__(self, tape, value, parents=(), backward_fn=None, op="leaf", name=None, needs_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of computation nodes."""

    def __init__(self, dtype=np.float64):
        self.nodes: list[Var] = []
        self.dtype = dtype

    def _record(self, value, parents, backward_fn, op, name=None) -> Var:
        value = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by {op}", op=op)
        parents = tuple(parents)
        needs = op == "param" or any(p.needs_grad for p in parents)
        var = Var(self, value, parents, backward_fn if needs else None, op, name, needs)
        self.nodes.append(var)
        return var

    def param(self, name: str, value: np.ndarray) -> Var:
        return self._record(value, (), None, "param", name)

    def const(self, value) -> Var:
        return self._record(value, (), None, "const")

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``loss`` with respect to every parameter leaf.

        Parameters that did not influence the loss get exact zeros.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.needs_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op != "param":
                continue
            g = grads.get(id(node))
            if g is None:
                g = np.zeros_like(node.value)
            if node.name in out:
                out[node.name] = out[node.name] + g
            else:
                out[node.name] = g
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _tape_of(*vars_: Var) -> Tape:
    return vars_[0].tape


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w``; a stack of matrices times one shared matrix runs as a single gemm."""
    if x.ndim > 2 and w.ndim == 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])
    return np.matmul(x, w)


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.op} {av.shape} by {b.op} {bv.shape}")

    def backward(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.needs_grad:
            if bv.ndim == 2 and g.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _tape_of(a)._record(_mm(av, bv), (a, b), backward, "matmul")


def add(a: Var, b: Var) -> Var:
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _tape_of(a)._record(out, (a, b), backward, "add")


def sub(a: Var, b: Var) -> Var:
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _tape_of(a)._record(out, (a, b), backward, "sub")


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _tape_of(a)._record(out, (a, b), backward, "mul")


def scale(a: Var, c: float) -> Var:
    return _tape_of(a)._record(a.value * c, (a,), lambda g: (g * c,), "scale")


def one_minus(a: Var) -> Var:
    return _tape_of(a)._record(1.0 - a.value, (a,), lambda g: (-g,), "one_minus")


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return _tape_of(a)._record(
        np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose"
    )


def reshape(a: Var, shape: tuple) -> Var:
    old = a.shape
    return _tape_of(a)._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(vars_: Sequence[Var], axis: int) -> Var:
    values = [v.value for v in vars_]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _tape_of(*vars_)._record(out, tuple(vars_), backward, "concat")


def broadcast_to(a: Var, shape: tuple) -> Var:
    av = a.value
    return _tape_of(a)._record(
        np.broadcast_to(av, shape).copy(), (a,), lambda g: (_unbroadcast(g, av.shape),), "broadcast"
    )


def sum_all(a: Var) -> Var:
    av = a.value
    return _tape_of(a)._record(
        np.asarray(av.sum()), (a,), lambda g: (np.full_like(av, g),), "sum"
    )


def mean_rows(a: Var, mask: np.ndarray | None = None) -> Var:
    """Mean over the second-to-last axis, optionally over ``mask``-ed rows only.

    ``mask`` has the shape of ``a`` without its last axis; rows where it is
    False are excluded from both numerator and count.
    """
    av = a.value
    if mask is None:
        w = np.full(av.shape[:-1], 1.0 / av.shape[-2], dtype=av.dtype)
    else:
        m = mask.astype(av.dtype)
        counts = m.sum(axis=-1, keepdims=True)
        if np.any(counts == 0):
            raise ShapeError("mean_rows: a row group has no valid entries")
        w = m / counts
    w = w[..., None]
    return _tape_of(a)._record(
        (av * w).sum(axis=-2), (a,), lambda g: (w * g[..., None, :],), "mean_rows"
    )


def gather_rows(a: Var, index: np.ndarray, valid: np.ndarray | None = None) -> Var:
    """Select rows of ``a`` along the second-to-last axis.

    ``index`` has shape (..., k). Positions where ``valid`` is False yield
    zero rows and receive no gradient.
    """
    av = a.value
    index = np.asarray(index, dtype=np.intp)
    safe = np.where(valid, index, 0) if valid is not None else index
    out = np.take_along_axis(av, safe[..., None], axis=-2)
    if valid is not None:
        out = out * valid[..., None]

    def backward(g):
        if valid is not None:
            g = g * valid[..., None]
        ga = np.zeros_like(av)
        rows, width = av.shape[-2], av.shape[-1]
        offsets = (np.arange(safe.size // safe.shape[-1]) * rows).reshape(*safe.shape[:-1], 1)
        np.add.at(ga.reshape(-1, width), (safe + offsets).ravel(), g.reshape(-1, width))
        return (ga,)

    return _tape_of(a)._record(out, (a,), backward, "gather_rows")


def softmax_rows(a: Var) -> Var:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    av = a.value
    e = np.exp(av - av.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _tape_of(a)._record(y, (a,), backward, "softmax_rows")


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(a: Var) -> Var:
    """Exact (erf-based) GELU."""
    av = a.value
    y = 0.5 * av * (1.0 + erf(av / _SQRT2))
    return _tape_of(a)._record(y, (a,), lambda g: (g * _gelu_grad(av),), "gelu")


def sigmoid(a: Var) -> Var:
    av = a.value
    y = np.empty_like(av)
    pos = av >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _tape_of(a)._record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def dropout(a: Var, rate: float, training: bool, rng: np.random.Generator | None) -> Var:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _tape_of(a)._record(a.value * mask, (a,), lambda g: (g * mask,), "dropout")


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy of (..., C) logits against integer class labels."""
    lv = logits.value
    n_classes = lv.shape[-1]
    labels = np.asarray(labels, dtype=np.intp).reshape(lv.shape[:-1])
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigError(f"label out of range [0, {n_classes})")
    logp = log_softmax(lv)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    count = max(1, labels.size)
    loss = -picked.sum() / count
    onehot = np.zeros_like(lv)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / count),)

    return _tape_of(logits)._record(np.asarray(loss), (logits,), backward, "cross_entropy")


def custom(tape: Tape, value, parents: Sequence[Var], backward_fn: Callable, op: str) -> Var:
    """Record an operation with a caller-supplied backward rule."""
    return tape._record(value, parents, backward_fn, op)
