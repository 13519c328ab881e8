"""Minimal reverse-mode differentiation over numpy float64 arrays.

Graphs are built eagerly: every operation returns a :class:`Tensor` that
remembers its parents and a closure mapping the output gradient to parent
gradients.  ``backward`` walks the graph in reverse topological order.

Parameters live in a *ParamStore*, an insertion-ordered ``dict`` mapping a
name to a float64 array.  :func:`leaves` wraps a store into graph leaves and
:func:`backward` returns a *GradStore* with the same names and shapes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError

ParamStore = dict[str, np.ndarray]
GradStore = dict[str, np.ndarray]


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "name")

    def __init__(self, value, parents=(), name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        # (parent, fn) pairs; fn maps d(out) to d(parent)
        self.parents: tuple[tuple[Tensor, Callable[[np.ndarray], np.ndarray]], ...] = parents
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.value + b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.value - b.value,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    return Tensor(
        a.value @ b.value,
        ((a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)),
    )


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, ((a, lambda g: g * (1.0 - out * out)),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.value * a.value, ((a, lambda g: 2.0 * g * a.value),))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return Tensor(out, ((a, lambda g: g - probs * g.sum(axis=-1, keepdims=True)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, ((a, lambda g: g * out),))


def total(a: Tensor) -> Tensor:
    """Sum of every entry, as a scalar node."""
    shape = a.shape
    return Tensor(a.value.sum(), ((a, lambda g: np.broadcast_to(g, shape).copy()),))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[i, index[i]]`` for each row ``i``."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        out = np.zeros(a.shape)
        out[rows, index] = g
        return out

    return Tensor(a.value[rows, index], ((a, grad_fn),))


def column(a: Tensor, j: int) -> Tensor:
    def grad_fn(g):
        out = np.zeros(a.shape)
        out[:, j] = g
        return out

    return Tensor(a.value[:, j], ((a, grad_fn),))


def leaves(params: ParamStore) -> dict[str, Tensor]:
    return {name: Tensor(value, name=name) for name, value in params.items()}


def backward(loss: Tensor, params: dict[str, Tensor]) -> GradStore:
    """Gradient of the scalar ``loss`` with respect to every leaf in ``params``.

    Leaves the loss does not depend on receive exact zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib

    out: GradStore = {}
    for name, leaf in params.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


# -- parameter stores -------------------------------------------------------


def shape_compatible(a: ParamStore, b: ParamStore) -> bool:
    return list(a) == list(b) and all(a[k].shape == b[k].shape for k in a)


def check_compatible(a: ParamStore, b: ParamStore) -> None:
    if list(a) != list(b):
        missing = sorted(set(a) ^ set(b))
        raise ConfigError(f"parameter names differ: {missing or 'order mismatch'}")
    bad = [k for k in a if a[k].shape != b[k].shape]
    if bad:
        raise ConfigError(f"parameter shapes differ for: {bad}")


def copy_store(params: ParamStore) -> ParamStore:
    return {k: v.copy() for k, v in params.items()}


def store_hash(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name, value in params.items():
        h.update(name.encode())
        h.update(str(value.shape).encode())
        h.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())
    return h.hexdigest()


def stores_equal(a: ParamStore, b: ParamStore) -> bool:
    return shape_compatible(a, b) and all(np.array_equal(a[k], b[k]) for k in a)


def ensure_finite(params: ParamStore, context: str = "") -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            where = f" ({context})" if context else ""
            raise NonFiniteError(f"non-finite values in parameter {name!r}{where}")


def grad_norm(grads: GradStore) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: GradStore, max_norm: float) -> GradStore:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(params: ParamStore, grads: GradStore, lr: float) -> ParamStore:
    """Return ``p - lr * g`` for every entry; the input store is not modified."""
    check_compatible(params, grads)
    if lr == 0:
        return copy_store(params)
    out = {k: params[k] - lr * grads[k] for k in params}
    ensure_finite(out, "sgd_step")
    return out


# -- feed-forward networks --------------------------------------------------


@dataclass(frozen=True)
class NetSpec:
    """Tanh MLP trunk with a linear policy head and a scalar value head."""

    input_width: int
    output_width: int
    hidden: tuple[int, ...] = (64,)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        width = self.input_width
        for i, h in enumerate(self.hidden):
            shapes[f"l{i}.w"] = (width, h)
            shapes[f"l{i}.b"] = (h,)
            width = h
        shapes["pi.w"] = (width, self.output_width)
        shapes["pi.b"] = (self.output_width,)
        shapes["v.w"] = (width, 1)
        shapes["v.b"] = (1,)
        return shapes

    def init(self, rng: np.random.Generator) -> ParamStore:
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
        params: ParamStore = {}
        for name, shape in self.shapes().items():
            if name.endswith(".w"):
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def zeros(self) -> ParamStore:
        return {name: np.zeros(shape) for name, shape in self.shapes().items()}

    def validate(self, params: ParamStore) -> None:
        expected = self.shapes()
        if list(params) != list(expected):
            raise ConfigError(f"parameter names {list(params)} do not match network {list(expected)}")
        bad = [k for k, s in expected.items() if params[k].shape != s]
        if bad:
            raise ConfigError(f"parameter shapes wrong for: {bad}")


def forward_mlp(params: ParamStore, x: np.ndarray, spec: NetSpec) -> tuple[np.ndarray, float]:
    """Plain numpy forward pass for a single input vector (no graph)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_width,):
        raise ConfigError(f"input has shape {x.shape}, network expects ({spec.input_width},)")
    h = x
    for i in range(len(spec.hidden)):
        h = np.tanh(h @ params[f"l{i}.w"] + params[f"l{i}.b"])
    logits = h @ params["pi.w"] + params["pi.b"]
    value = h @ params["v.w"] + params["v.b"]
    return logits, float(value[0])


def forward_graph(nodes: dict[str, Tensor], x: np.ndarray, spec: NetSpec) -> tuple[Tensor, Tensor]:
    """Batched forward on graph leaves: ``x`` is (batch, input_width)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ConfigError(f"batch has shape {x.shape}, network expects (*, {spec.input_width})")
    h: Tensor = Tensor(x)
    for i in range(len(spec.hidden)):
        h = tanh(h @ nodes[f"l{i}.w"] + nodes[f"l{i}.b"])
    logits = h @ nodes["pi.w"] + nodes["pi.b"]
    value = column(h @ nodes["v.w"] + nodes["v.b"], 0)
    return logits, value


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- gradient checking ------------------------------------------------------


def finite_diff_check(
    params: ParamStore,
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    eps: float = 1e-5,
    grads: GradStore | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` receives graph leaves and returns a scalar node.  Passing
    ``grads`` checks those instead of the ones ``backward`` produces.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if grads is None:
        nodes = leaves(params)
        grads = backward(loss_fn(nodes), nodes)

    def evaluate(store: ParamStore) -> float:
        return float(loss_fn(leaves(store)).value)

    worst = 0.0
    probe = copy_store(params)
    for name, value in params.items():
        flat = probe[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate(probe)
            flat[i] = orig - eps
            f_minus = evaluate(probe)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
