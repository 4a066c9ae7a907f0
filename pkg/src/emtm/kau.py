"""Knowledge Aggregation Unit: per-position gating over teacher distributions.

Multi-scale convolutions over the encoded video are pooled, joined with the
pooled query, and mapped by one fully connected layer to a weight for every
(teacher, boundary channel, clip).  Weights are normalized across teachers,
so the ensemble at each clip is a convex combination of the teachers there.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Node, layers, ops
from .unify import stack


@dataclass
class TeacherBank:
    distributions: list  # StartEndDistribution per teacher

    def __post_init__(self):
        if not self.distributions:
            raise ContractError("teacher bank is empty")
        ns = {p.n for p in self.distributions}
        if len(ns) != 1:
            raise ShapeError(f"teacher distributions disagree on n: {sorted(ns)}")

    @property
    def b(self):
        return len(self.distributions)

    @property
    def n(self):
        return self.distributions[0].n

    def as_array(self):
        """(b, 2, n) stacked probabilities."""
        return np.stack([stack(p) for p in self.distributions])


@dataclass
class KAUOutput:
    attention: Node  # (B, b, 2, n), sums to one over the teacher axis
    ensemble: Node  # (B, 2, n), renormalized per channel
    unnormalized: Node  # (B, 2, n), the raw weighted sum


class KAU:
    def __init__(self, config, store, b, prefix="kau", zero_head=True):
        self.config = config
        self.store = store
        self.b = int(b)
        self.prefix = prefix
        d, n = config.d, config.n
        for k in config.kau_kernels:
            store.get_or_create(f"{prefix}.conv{k}.w", (k, d, d))
            store.get_or_create(f"{prefix}.conv{k}.b", (d,), "zeros")
        width = (len(config.kau_kernels) + 1) * d
        store.get_or_create(f"{prefix}.fc.w", (width, 2 * self.b * n), "zeros" if zero_head else "glorot")
        store.get_or_create(f"{prefix}.fc.b", (2 * self.b * n,), "zeros")

    def param_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix + ".")]

    def gate_features(self, v_enc, q_enc, qmask=None):
        """The intermediate vector ``[q_avg, pooled multi-scale video]`` (B, 4d)."""
        s, P = self.store, self.prefix
        convs = [ops.conv1d(v_enc, s[f"{P}.conv{k}.w"], s[f"{P}.conv{k}.b"])
                 for k in self.config.kau_kernels]
        g = ops.mean(ops.concat(convs, axis=-1), axis=1)
        q_avg = layers.masked_mean(q_enc, qmask, axis=1)
        return ops.concat([q_avg, g], axis=-1)

    def forward(self, v_enc, q_enc, bank, qmask=None):
        """``bank`` is a (B, b, 2, n) array or Node of teacher probabilities."""
        s, P = self.store, self.prefix
        bank_v = bank.value if isinstance(bank, Node) else np.asarray(bank)
        B, n = v_enc.shape[0], v_enc.shape[1]
        if bank_v.shape != (B, self.b, 2, n):
            raise ShapeError(f"teacher bank shape {bank_v.shape} does not match "
                             f"(batch={B}, b={self.b}, 2, n={n})")
        v = self.gate_features(v_enc, q_enc, qmask)
        logits = ops.reshape(layers.linear(v, s[f"{P}.fc.w"], s[f"{P}.fc.b"]), (B, self.b, 2, n))
        a = ops.softmax(logits, axis=1)
        raw = ops.sum(ops.mul(a, bank), axis=1)
        ens = ops.div(raw, ops.sum(raw, axis=-1, keepdims=True))
        return KAUOutput(a, ens, raw)


def kau_forward(v_enc, q_enc, bank, kau):
    """Single-sample convenience: ``v_enc`` (n, d), ``q_enc`` (m, d), a :class:`TeacherBank`."""
    if bank.n != v_enc.shape[0]:
        raise ShapeError(f"teacher bank has n={bank.n} but video encoding has n={v_enc.shape[0]}")
    v = ops.reshape(v_enc, (1,) + tuple(v_enc.shape))
    q = ops.reshape(q_enc, (1,) + tuple(q_enc.shape))
    return kau.forward(v, q, bank.as_array()[None])


def kau_parameter_count(config, b):
    d, n = config.d, config.n
    convs = sum(k * d * d + d for k in config.kau_kernels)
    width = (len(config.kau_kernels) + 1) * d
    return convs + width * 2 * b * n + 2 * b * n
