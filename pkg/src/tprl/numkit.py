"""Small reverse-mode autodiff core over dense float64 matrices.

Values are numpy arrays of shape ``(rows, cols)`` or stacks of such
matrices ``(..., rows, cols)``; every op acts on the trailing two axes and
broadcasts over the leading ones, so a batch of windows shares one graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing is recorded for backward."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_matrix(values) -> np.ndarray:
    """Copy ``values`` into a float64 array of at least two dimensions.

    Raises ValueError on NaN/Inf entries.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.size == 0:
        raise ValueError("empty matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad")

    def __init__(self, value, requires_grad: bool = True):
        self.value = as_matrix(value)
        self._grad = None
        self.parents: tuple[Node, ...] = ()
        self.op = "leaf"
        self._backward = None
        self.requires_grad = requires_grad

    @classmethod
    def _from_op(cls, value, parents, op, backward) -> "Node":
        node = cls.__new__(cls)
        node.value = value
        node._grad = None
        node.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            node.parents = tuple(parents)
            node._backward = backward
            node.requires_grad = True
        else:
            node.parents = ()
            node._backward = None
            node.requires_grad = False
        return node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.value.shape)
        if self._grad is None:
            self._grad = g.copy()
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar (1x1) node."""
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"


def const(values) -> Node:
    return Node(values, requires_grad=False)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, what: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{what}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    if bv.ndim == 2 and av.ndim > 2:
        # stacked @ shared weight: fold the stack into rows
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ bv.T)
            if b.requires_grad:
                b._accumulate(av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
    else:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(bv, -1, -2))
            if b.requires_grad:
                b._accumulate(np.swapaxes(av, -1, -2) @ g)

    return Node._from_op(av @ bv, (a, b), "matmul", backward)


def transpose(a: Node) -> Node:
    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return Node._from_op(np.swapaxes(a.value, -1, -2).copy(), (a,), "transpose", backward)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Node._from_op(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return Node._from_op(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        a._accumulate(g * bv)
        b._accumulate(g * av)

    return Node._from_op(av * bv, (a, b), "mul", backward)


def scale(a: Node, c: float) -> Node:
    def backward(g):
        a._accumulate(g * c)

    return Node._from_op(a.value * c, (a,), "scale", backward)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def backward(g):
        a._accumulate(g * mask)

    return Node._from_op(np.where(mask, a.value, 0.0), (a,), "relu", backward)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def backward(g):
        a._accumulate(g * out)

    return Node._from_op(out, (a,), "exp", backward)


def ln(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise ValueError("ln: domain error, non-positive entry")
    av = a.value

    def backward(g):
        a._accumulate(g / av)

    return Node._from_op(np.log(av), (a,), "ln", backward)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return Node._from_op(out, (a,), "tanh", backward)


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp entries to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.value >= lo) & (a.value <= hi)

    def backward(g):
        a._accumulate(g * inside)

    return Node._from_op(np.clip(a.value, lo, hi), (a,), "clip", backward)


def minimum(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.value <= b.value

    def backward(g):
        a._accumulate(g * take_a)
        b._accumulate(g * ~take_a)

    return Node._from_op(np.where(take_a, a.value, b.value), (a, b), "minimum", backward)


_UNARY = {"relu": relu, "exp": exp, "ln": ln, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, kind: str, other=None) -> Node:
    """Dispatch by name: add/sub/mul take ``other``; scale takes a float."""
    if kind in _BINARY:
        return _BINARY[kind](a, other)
    if kind == "scale":
        return scale(_lift(a), float(other))
    if kind in _UNARY:
        return _UNARY[kind](_lift(a))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions and reshaping ---------------------------------------------------


def sum_all(a: Node) -> Node:
    shape = a.value.shape

    def backward(g):
        a._accumulate(np.broadcast_to(g.reshape(()), shape))

    return Node._from_op(np.array([[a.value.sum()]]), (a,), "sum_all", backward)


def mean_all(a: Node) -> Node:
    return scale(sum_all(a), 1.0 / a.value.size)


def sum_rows(a: Node) -> Node:
    """Sum over columns, keeping one column per row."""

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.value.shape))

    return Node._from_op(a.value.sum(axis=-1, keepdims=True), (a,), "sum_rows", backward)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        a._accumulate(full)

    return Node._from_op(a.value[..., start:stop].copy(), (a,), "slice_cols", backward)


def concat_cols(parts: Sequence[Node]) -> Node:
    parts = [_lift(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(g[..., lo:hi])

    value = np.concatenate([p.value for p in parts], axis=-1)
    return Node._from_op(value, tuple(parts), "concat_cols", backward)


def concat_rows(parts: Sequence[Node]) -> Node:
    parts = [_lift(p) for p in parts]
    lead = np.broadcast_shapes(*(p.shape[:-2] for p in parts))
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(g[..., lo:hi, :])

    value = np.concatenate(
        [np.broadcast_to(p.value, lead + p.shape[-2:]) for p in parts], axis=-2
    )
    return Node._from_op(value, tuple(parts), "concat_rows", backward)


def rows(a: Node, start: int, stop: int) -> Node:
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        a._accumulate(full)

    return Node._from_op(a.value[..., start:stop, :].copy(), (a,), "rows", backward)


# -- normalisation and softmax --------------------------------------------------


def softmax_rows(a: Node, mask: np.ndarray | None = None) -> Node:
    """Row-wise softmax, max-stabilised.

    ``mask`` is an additive array of 0 / -inf broadcast onto ``a``.
    """
    z = a.value if mask is None else a.value + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Node._from_op(y, (a,), "softmax_rows", backward)


def layer_norm(a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    if gain.shape[-1] != a.shape[-1] or bias.shape[-1] != a.shape[-1]:
        raise ValueError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {a.shape}")
    x = a.value
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        dxhat = g * gv
        a._accumulate(
            inv / n
            * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
               - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        )
        gain._accumulate(g * xhat)
        bias._accumulate(g)

    return Node._from_op(xhat * gv + bias.value, (a, gain, bias), "layer_norm", backward)


# -- gradient checking -------------------------------------------------------------


def check_gradient(f: Callable[[Node], Node], at, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_matrix(at)
    node = Node(x)
    out = f(node)
    if out.value.size != 1:
        raise ValueError(f"check_gradient needs a scalar-valued function, got {out.shape}")
    out.backward()
    analytic = node.grad.copy()
    numeric = np.zeros_like(x)
    with no_grad():
        for idx in np.ndindex(x.shape):
            xp = x.copy()
            xp[idx] += step
            xm = x.copy()
            xm[idx] -= step
            fp = f(Node(xp)).value.item()
            fm = f(Node(xm)).value.item()
            numeric[idx] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical draw sequences."""
    return np.random.default_rng(np.random.PCG64(int(seed) & (2**64 - 1)))
