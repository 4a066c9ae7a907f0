"""Differentiable operations on :class:`~emtm.numerics.engine.Node`.

Every op takes and returns Nodes (plain arrays and scalars are promoted to
constants).  Arrays are float64; elementwise ops broadcast numpy-style.
"""

import numpy as np

from .. import _kernels as K
from ..errors import ConfigError, ShapeError
from .engine import Node, as_node, make_result


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return make_result(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return make_result(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return make_result(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return make_result(out, (a, b), back)


def matmul(a, b):
    """Batched matrix product over the last two axes (both operands at least 2-D)."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return make_result(av @ bv, (a, b), back)


def conv1d(x, w, bias):
    """Same-padded cross-correlation along the temporal axis.

    ``x`` is (n, c_in) or (B, n, c_in); ``w`` is (k, c_in, c_out) with k odd;
    ``bias`` is (c_out,).  Positions outside the sequence read as zero.
    """
    x, w, bias = as_node(x), as_node(w), as_node(bias)
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 3 or xv.shape[2] != w.shape[1] or bias.shape != (w.shape[2],):
        raise ShapeError(f"conv1d: input {x.shape}, kernel {w.shape}, bias {bias.shape}")
    y, cols = K.conv1d_forward(xv, w.value, bias.value)
    wv = w.value

    def back(g):
        g3 = g[None] if squeeze else g
        gx, gw, gb = K.conv1d_backward(np.ascontiguousarray(g3), cols, xv.shape, wv)
        return (gx[0] if squeeze else gx), gw, gb

    return make_result(y[0] if squeeze else y, (x, w, bias), back)


def _axis_last(x, axis):
    return np.moveaxis(x, axis, -1)


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; ``mask`` (bool) marks the slots to keep."""
    x = as_node(x)
    axis = axis % x.ndim
    xl = _axis_last(x.value, axis)
    keep = None if mask is None else _axis_last(np.broadcast_to(mask, x.shape), axis)
    pl = K.softmax_last(np.ascontiguousarray(xl), keep)
    p = np.moveaxis(pl, -1, axis)

    def back(g):
        gl = K.softmax_last_backward(np.ascontiguousarray(_axis_last(g, axis)), pl)
        return (np.moveaxis(gl, -1, axis),)

    return make_result(p, (x,), back)


def log_softmax(x, axis=-1, mask=None):
    x = as_node(x)
    axis = axis % x.ndim
    keep = None if mask is None else _axis_last(np.broadcast_to(mask, x.shape), axis)
    yl = K.log_softmax_last(_axis_last(x.value, axis), keep)
    pl = np.exp(yl)
    y = np.moveaxis(yl, -1, axis)

    def back(g):
        gl = _axis_last(g, axis)
        if keep is not None:
            gl = np.where(keep, gl, 0.0)
        gx = gl - pl * gl.sum(axis=-1, keepdims=True)
        return (np.moveaxis(gx, -1, axis),)

    return make_result(y, (x,), back)


def log(x, floor=None):
    """Natural log; with ``floor`` the input is clamped below first (no gradient where clamped)."""
    x = as_node(x)
    xv = x.value
    if floor is None:
        return make_result(np.log(xv), (x,), lambda g: (g / xv,))
    active = xv > floor
    xc = np.maximum(xv, floor)
    return make_result(np.log(xc), (x,), lambda g: (np.where(active, g / xc, 0.0),))


def exp(x):
    x = as_node(x)
    y = np.exp(x.value)
    return make_result(y, (x,), lambda g: (g * y,))


def relu(x):
    x = as_node(x)
    pos = x.value > 0
    return make_result(np.where(pos, x.value, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_node(x)
    shape = x.shape
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(y, (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_node(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max(x, axis, keepdims=False):  # noqa: A001 - mirrors numpy
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_node(x)
    xv = x.value
    idx = np.expand_dims(xv.argmax(axis=axis), axis)
    y = np.take_along_axis(xv, idx, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_result(y if keepdims else np.squeeze(y, axis), (x,), back)


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    axis = axis % nodes[0].ndim
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([n.value for n in nodes], axis=axis)
    return make_result(y, nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x, shape):
    x = as_node(x)
    old = x.shape
    return make_result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_node(x)
    inv = np.argsort(axes)
    return make_result(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, key):
    """Basic (non-advanced) indexing."""
    x = as_node(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return make_result(x.value[key], (x,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    y, xhat, inv = K.layer_norm_forward(x.value, gamma.value, beta.value, eps)
    gv = gamma.value

    def back(g):
        return K.layer_norm_backward(g, xhat, inv, gv)

    return make_result(y, (x, gamma, beta), back)


def dropout(x, p, rng, training):
    """Inverted dropout: scaled mask while training, identity otherwise."""
    x = as_node(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    m = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.value * m, (x,), lambda g: (g * m,))


def stop_gradient(x):
    return as_node(x).detach()
