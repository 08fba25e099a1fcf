"""Reverse-mode automatic differentiation, parameter storage and Adam.

A :class:`Tensor` wraps a numpy array (0-d for scalars) and remembers the
operation that produced it.  :func:`backward` walks the recorded graph once
in reverse topological order and accumulates ``d(loss)/d(node)`` into
``node.grad``.

Only the primitives the models need are provided.  Every primitive supports
numpy broadcasting; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, ShapeMismatch

_GRAD_ENABLED = True

PARAMS_FORMAT = "# magjoint-params v1"


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def item(self):
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(value, parents, backward):
    """Create an output node, recording the graph only when needed."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.value = value
        out.requires_grad = True
        out.grad = None
        out._parents = parents
        out._backward = backward
        out.name = None
        return out
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    return out


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeMismatch(f"add: {sa} vs {sb}") from exc
    return _node(value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise ShapeMismatch(f"sub: {sa} vs {sb}") from exc
    return _node(value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    try:
        value = av * bv
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc
    return _node(
        value,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    try:
        value = av / bv
    except ValueError as exc:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}") from exc
    return _node(
        value,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * value / bv, bv.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product over the last two axes with broadcast batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
    value = av @ bv

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(value, (a, b), backward)


def matvec(m, v):
    """``m @ v`` for a vector (or batch of row vectors) ``v``."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim < 2 or m.shape[-1] != v.shape[-1]:
        raise ShapeMismatch(f"matvec: {m.shape} @ {v.shape}")
    return reshape(matmul(m, reshape(v, v.shape + (1,))), np.broadcast_shapes(m.shape[:-2], v.shape[:-1]) + m.shape[-2:-1])


def tanh(a):
    a = as_tensor(a)
    value = np.tanh(a.value)
    return _node(value, (a,), lambda g: (g * (1.0 - value * value),))


def sigmoid(a):
    a = as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(value, (a,), lambda g: (g * value * (1.0 - value),))


def exp(a):
    a = as_tensor(a)
    value = np.exp(np.minimum(a.value, 700.0))
    return _node(value, (a,), lambda g: (g * value,))


def log(a):
    a = as_tensor(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def softplus(a):
    a = as_tensor(a)
    av = a.value
    value = np.logaddexp(0.0, av)
    return _node(value, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def square(a):
    a = as_tensor(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    a = as_tensor(a)
    value = np.sqrt(a.value)
    return _node(value, (a,), lambda g: (0.5 * g / value,))


def reciprocal(a):
    a = as_tensor(a)
    value = 1.0 / a.value
    return _node(value, (a,), lambda g: (-g * value * value,))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(value, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    basic = not isinstance(idx, (list, np.ndarray)) and not (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(value, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.stack([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {[t.shape for t in tensors]}") from exc
    n = len(tensors)
    return _node(
        value,
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ------------------------------------------------------------------ backward


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate ``d(loss)/d(leaf)`` into every reachable leaf's ``grad``."""
    loss = as_tensor(loss)
    if loss.value.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else np.array(g, dtype=float)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ----------------------------------------------------------- parameter store


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamStore:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=float), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.value)

    def grads(self):
        return {k: t.grad.copy() for k, t in self.params.items()}

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in self.params.values()))

    def state_dict(self):
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_state_dict(self, values):
        for k, t in self.params.items():
            arr = np.asarray(values[k], dtype=float)
            if arr.shape != t.shape:
                raise ShapeMismatch(f"{k}: stored {arr.shape}, expected {t.shape}")
            t.value = arr.copy()

    def num_params(self):
        return sum(t.value.size for t in self.params.values())


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    scale = 1.0
    if clip_norm is not None:
        norm = store.grad_norm()
        if norm > clip_norm:
            scale = clip_norm / norm
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, t in store.params.items():
        g = t.grad * scale
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.value = t.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckResult:
    rel_err: dict = field(default_factory=dict)
    directional_rel_err: float = 0.0

    @property
    def max_rel_err(self):
        errs = list(self.rel_err.values()) + [self.directional_rel_err]
        return max(errs) if errs else 0.0


def _rel(a, n, floor):
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def gradcheck(loss_fn, store, h=1e-5, max_per_param=None, rng=None, floor=1e-6, directions=1):
    """Compare reverse-mode gradients against central differences.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    For each parameter the relative error is the norm of the difference over
    the checked entries divided by the larger of the two gradient norms.  With
    ``max_per_param`` a random subset of entries is checked.  Additionally
    ``directions`` random directions over all parameters are checked through
    the directional derivative.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = store.grads()
    store.zero_grad()

    def value():
        with no_grad():
            return float(loss_fn().value)

    result = GradCheckResult()
    for name, t in store.items():
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        result.rel_err[name] = _rel(analytic[name].reshape(-1)[idx], numeric, floor)

    worst = 0.0
    for _ in range(directions):
        dirs = {k: rng.standard_normal(t.shape) for k, t in store.items()}
        norm = math.sqrt(sum(float(np.sum(d * d)) for d in dirs.values()))
        dirs = {k: d / norm for k, d in dirs.items()}
        ana = sum(float(np.sum(analytic[k] * d)) for k, d in dirs.items())
        orig = {k: t.value.copy() for k, t in store.items()}
        for k, t in store.items():
            t.value = orig[k] + h * dirs[k]
        fp = value()
        for k, t in store.items():
            t.value = orig[k] - h * dirs[k]
        fm = value()
        for k, t in store.items():
            t.value = orig[k]
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    result.directional_rel_err = worst
    return result


# --------------------------------------------------------------- persistence


def _fmt(x):
    return format(float(x), ".17g")


def save_params(path, store_or_values, meta=None):
    """Write parameters as text.

    Layout: a format-version line, then ``@meta key = value`` lines, then one
    ``name<TAB>shape<TAB>values`` line per parameter where shape is
    comma-separated and values are space-separated in row-major order.
    """
    values = store_or_values.state_dict() if isinstance(store_or_values, ParamStore) else store_or_values
    lines = [PARAMS_FORMAT]
    for k, v in (meta or {}).items():
        lines.append(f"@meta {k} = {v}")
    for name, arr in values.items():
        arr = np.asarray(arr, dtype=float)
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"{name}\t{shape}\t" + " ".join(_fmt(x) for x in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(values, meta)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != PARAMS_FORMAT:
        raise FormatVersionError(f"{path}: expected {PARAMS_FORMAT!r}, found {text[0] if text else ''!r}")
    values, meta = {}, {}
    for line in text[1:]:
        if not line.strip():
            continue
        if line.startswith("@meta "):
            key, _, val = line[6:].partition(" = ")
            meta[key.strip()] = val.strip()
            continue
        name, shape, data = line.split("\t")
        dims = tuple(int(n) for n in shape.split(",")) if shape else ()
        arr = np.array([float(x) for x in data.split()], dtype=float) if data else np.zeros(0)
        values[name] = arr.reshape(dims)
    return values, meta
