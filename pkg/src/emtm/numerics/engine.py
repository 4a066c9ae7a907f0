"""Reverse-mode differentiation over numpy arrays.

A :class:`Node` holds a float64 array and, when it participates in the tape,
references to its parents plus a closure mapping the upstream gradient to one
gradient per parent.  Leaves created with ``requires_grad=True`` (parameters)
accumulate gradients additively across :func:`backward` calls; callers zero
them between steps.
"""

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the tape (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def grad_or_zeros(self):
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def detach(self):
        """Same value, cut from the tape; upstream nodes get no gradient through it."""
        return Node(self.value)

    def item(self):
        return float(self.value.reshape(-1)[0])

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def make_result(value, parents, backward_fn):
    """Wrap an op output, recording it on the tape only when needed."""
    out = Node(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.requires_grad = True
    return out


def _topological_order(root):
    # iterative post-order DFS; parent lists are ordered so the result is deterministic
    order = []
    seen = set()
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.value.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
