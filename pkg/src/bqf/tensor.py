"""Dense float64 tensors with reverse-mode autodiff.

Just enough machinery for a tiny transformer plus quantizers with custom
gradients: matmul, a handful of elementwise ops, softmax/rmsnorm/cross-entropy,
and ``custom_grad`` for quantizer forward/backward pairs. Backward replays the
recorded ops in exact reverse creation order; a graph can be walked once.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d float64 array, optional gradient buffer, and the op that made it.

    Leaf tensors are created from data; op results carry ``_parents`` and a
    ``_backward`` closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq_counter)
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        Visits the reachable graph in exact reverse creation order and
        accumulates ``.grad`` on every tensor that requires one. Calling
        backward twice on the same root without rebuilding the graph raises.
        """
        if self._done:
            raise RuntimeError("backward() already ran on this graph; rebuild it with a new forward")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        self.grad = grad if self.grad is None else self.grad + grad
        for t in nodes:
            if t._backward is None:
                continue
            t._done = True
            parent_grads = t._backward(t.grad)
            for p, g in zip(t._parents, parent_grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.shape:
                    raise ShapeError(
                        f"backward produced gradient of shape {g.shape} for tensor of shape {p.shape}"
                    )
                p.grad = g if p.grad is None else p.grad + g
        self._done = True

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitive ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dims on either operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        ga = _sum_to_shape(ga, a.shape) if ga.shape != a.shape else ga
        if gb.shape != b.shape:
            # b broadcast over a's batch dims: fold batches into one reduction
            gb = np.matmul(
                a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g: np.ndarray):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g: np.ndarray):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    x = _as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)
    y = 0.5 * x.data * (1.0 + th)

    def backward(g: np.ndarray):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)

    return Tensor._from_op(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (x,), backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x * weight / sqrt(mean(x^2, last axis) + eps)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm weight shape {weight.shape} does not match feature dim {x.shape[-1]}")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data**2, axis=-1, keepdims=True) + eps)
    y = x.data * inv * weight.data

    def backward(g: np.ndarray):
        gw_x = g * weight.data
        dot = np.sum(gw_x * x.data, axis=-1, keepdims=True)
        gx = gw_x * inv - x.data * (inv**3) * dot / n
        gw = np.sum(g * x.data * inv, axis=tuple(range(x.ndim - 1)))
        return gx, gw

    return Tensor._from_op(y, (x, weight), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got shape {logits.shape}")
    targets = np.asarray(targets)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target index out of range [0, {vocab})")
    m = np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = np.sum(e, axis=1, keepdims=True)
    logp = logits.data - m - np.log(z)
    loss = -np.mean(logp[np.arange(n), targets])

    def backward(g: np.ndarray):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(out, (table,), backward)


def reshape(x: Tensor, *shape) -> Tensor:
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.data, a, b)
    return Tensor._from_op(np.ascontiguousarray(out), (x,), lambda g: (np.swapaxes(g, a, b),))


def tsum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


def custom_grad(
    x: Tensor,
    forward_fn: Callable[[np.ndarray], np.ndarray],
    backward_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> Tensor:
    """Apply ``forward_fn`` to the values while routing backward through
    ``backward_fn(upstream_grad, x_data)`` verbatim.

    This is the hook for quantizer gradients: straight-through estimators and
    the annealed-quantizer derivative both plug in here.
    """
    x = _as_tensor(x)
    out = np.asarray(forward_fn(x.data), dtype=np.float64)
    if out.shape != x.shape:
        raise ShapeError(f"forward_fn changed shape {x.shape} -> {out.shape}")

    def backward(g: np.ndarray):
        gx = np.asarray(backward_fn(g, x.data), dtype=np.float64)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)
