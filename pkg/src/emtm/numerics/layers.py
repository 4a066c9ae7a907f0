"""Composite layers built from :mod:`emtm.numerics.ops`."""

import numpy as np

from ..errors import ConfigError
from . import ops


def linear(x, w, b=None):
    y = ops.matmul(x, w)
    return y if b is None else ops.add(y, b)


def conv_block(x, w, b, gamma, beta, mask=None, dropout=0.0, rng=None, training=False):
    """``x + relu(layer_norm(conv1d(x)))``, with padded positions re-zeroed."""
    h = ops.relu(ops.layer_norm(ops.conv1d(x, w, b), gamma, beta))
    h = ops.dropout(h, dropout, rng, training)
    y = ops.add(x, h)
    if mask is not None:
        y = ops.mul(y, mask[..., None].astype(np.float64))
    return y


def self_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, gamma, beta, heads, mask=None):
    """Post-norm multi-head self-attention block over ``x`` (B, L, d).

    ``mask`` (B, L) marks valid positions; padded keys get zero attention and
    padded outputs are re-zeroed.
    """
    B, L, d = x.shape
    if d % heads:
        raise ConfigError(f"hidden size {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    keep = None if mask is None else mask[:, None, None, :]
    att = ops.softmax(scores, axis=-1, mask=keep)
    ctx = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    y = ops.layer_norm(ops.add(x, linear(ctx, wo, bo)), gamma, beta)
    if mask is not None:
        y = ops.mul(y, mask[..., None].astype(np.float64))
    return y


def masked_mean(x, mask, axis=1):
    """Mean of ``x`` (B, L, d) over valid positions along ``axis``."""
    if mask is None:
        return ops.mean(x, axis=axis)
    w = mask.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    return ops.sum(ops.mul(x, w[..., None]), axis=axis)
