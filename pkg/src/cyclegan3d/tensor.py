"""Reverse-mode automatic differentiation over dense NumPy arrays.

Every differentiable op builds its output with :meth:`Tensor.from_op`, handing
over the parent tensors and a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` orders the recorded graph
topologically and replays the closures once each, newest first.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, pool sampling)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised by :func:`check_finite` when a tensor holds NaN or Inf."""


class Tensor:
    """A NumPy array with an optional gradient and a link into the op graph.

    Network activations use the (n, c, d, h, w) axis order; scalars produced
    by reductions have shape ``()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward):
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)

        order = _topological_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; definitions live in functional
    def __add__(self, other):
        from . import functional as fn
        return fn.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as fn
        return fn.sub(self, other)

    def __rsub__(self, other):
        from . import functional as fn
        return fn.add(fn.neg(self), other)

    def __mul__(self, other):
        from . import functional as fn
        return fn.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as fn
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return fn.mul(self, 1.0 / other)

    def __neg__(self):
        from . import functional as fn
        return fn.neg(self)

    def sum(self):
        from . import functional as fn
        return fn.sum(self)

    def mean(self):
        from . import functional as fn
        return fn.mean(self)


def _topological_order(root):
    """Iterative post-order DFS; each node appears exactly once."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(t, label="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {label}")
    return t
