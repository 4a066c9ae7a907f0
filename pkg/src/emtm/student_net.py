"""Span-grounding network shared by the student and its isomorphic teacher.

Pipeline: per-stream projection plus positional table, a convolutional
encoder with a self-attention head for each stream, context-query attention
fusing the query into every clip, and a two-stage span predictor whose end
head reads features computed downstream of the start head.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError
from .numerics import layers, ops
from .unify import StartEndDistribution


@dataclass
class ModelConfig:
    d: int = 128
    n: int = 32
    d_v: int = 64
    d_q: int = 50
    m_max: int = 10
    conv_kernel: int = 7
    heads: int = 8
    encoder_blocks: int = 2
    dropout: float = 0.2
    sigma: float = None  # Gaussian width in clips; None means n / 20
    alpha: float = 0.1
    temperature: float = 1.0
    seed: int = 0
    kl_direction: str = "ensemble_first"
    align_weight: float = 0.0
    kau_kernels: tuple = field(default=(3, 5, 7))

    def __post_init__(self):
        self.kau_kernels = tuple(int(k) for k in self.kau_kernels)
        for name in ("d", "n", "d_v", "d_q", "m_max", "conv_kernel", "heads", "encoder_blocks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.conv_kernel % 2 == 0 or any(k % 2 == 0 for k in self.kau_kernels):
            raise ConfigError("convolution kernel sizes must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.kl_direction not in ("ensemble_first", "student_first"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")

    @property
    def gaussian_sigma(self):
        return self.n / 20.0 if self.sigma is None else self.sigma

    @property
    def pos_len(self):
        return max(self.n, self.m_max)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["kau_kernels"] = list(self.kau_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EncodedPair:
    v_enc: object  # Node (B, n, d)
    q_enc: object  # Node (B, m_max, d)


@dataclass
class FusedFeatures:
    v_qv: object  # Node (B, n, d)


def _block_params(store, prefix, k, d):
    store.get_or_create(f"{prefix}.conv.w", (k, d, d))
    store.get_or_create(f"{prefix}.conv.b", (d,), "zeros")
    store.get_or_create(f"{prefix}.ln.g", (d,), "ones")
    store.get_or_create(f"{prefix}.ln.b", (d,), "zeros")


def _attn_params(store, prefix, d):
    for name in ("q", "k", "v", "o"):
        store.get_or_create(f"{prefix}.w{name}", (d, d))
        store.get_or_create(f"{prefix}.b{name}", (d,), "zeros")
    store.get_or_create(f"{prefix}.ln.g", (d,), "ones")
    store.get_or_create(f"{prefix}.ln.b", (d,), "zeros")


class StudentNet:
    """One grounding network whose parameters live in a :class:`ParameterStore`.

    ``encoder_prefix`` names the projection and encoder parameters; pointing
    two networks at the same prefix makes them share those layers.
    Everything under ``prefix`` (positional table, attention fusion,
    predictor) is private.
    """

    def __init__(self, config, store, prefix="student", encoder_prefix=None):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.encoder_prefix = encoder_prefix or f"{prefix}.enc"
        self._build()

    def _build(self):
        c, s, E, P = self.config, self.store, self.encoder_prefix, self.prefix
        d, k = c.d, c.conv_kernel
        s.get_or_create(f"{E}.ffn_v.w", (c.d_v, d))
        s.get_or_create(f"{E}.ffn_v.b", (d,), "zeros")
        s.get_or_create(f"{E}.ffn_q.w", (c.d_q, d))
        s.get_or_create(f"{E}.ffn_q.b", (d,), "zeros")
        for stream in ("venc", "qenc"):
            for i in range(c.encoder_blocks):
                _block_params(s, f"{E}.{stream}.block{i}", k, d)
            _attn_params(s, f"{E}.{stream}.attn", d)
        s.get_or_create(f"{P}.pos", (c.pos_len, d), "normal")
        s.get_or_create(f"{P}.cqa.w_v", (d, 1))
        s.get_or_create(f"{P}.cqa.w_q", (d, 1))
        s.get_or_create(f"{P}.cqa.w_vq", (d,), "normal")
        s.get_or_create(f"{P}.cqa.ffn.w", (4 * d, d))
        s.get_or_create(f"{P}.cqa.ffn.b", (d,), "zeros")
        for head in ("start", "end"):
            _block_params(s, f"{P}.pred.{head}_block", k, d)
            s.get_or_create(f"{P}.pred.{head}.w", (d, 1))
            s.get_or_create(f"{P}.pred.{head}.b", (1,), "zeros")

    def encoder_names(self):
        return [n for n in self.store.names() if n.startswith(self.encoder_prefix + ".")]

    def private_names(self):
        return [n for n in self.store.names() if n.startswith(self.prefix + ".")
                and not n.startswith(self.encoder_prefix + ".")]

    def param_names(self):
        return self.encoder_names() + self.private_names()

    # -- pieces ------------------------------------------------------------

    def _conv_block(self, x, prefix, mask, rng, training):
        s = self.store
        return layers.conv_block(x, s[f"{prefix}.conv.w"], s[f"{prefix}.conv.b"],
                                 s[f"{prefix}.ln.g"], s[f"{prefix}.ln.b"], mask=mask,
                                 dropout=self.config.dropout, rng=rng, training=training)

    def _encoder(self, x, stream, mask, rng, training):
        s, E = self.store, self.encoder_prefix
        for i in range(self.config.encoder_blocks):
            x = self._conv_block(x, f"{E}.{stream}.block{i}", mask, rng, training)
        a = f"{E}.{stream}.attn"
        return layers.self_attention(
            x, s[f"{a}.wq"], s[f"{a}.bq"], s[f"{a}.wk"], s[f"{a}.bk"], s[f"{a}.wv"], s[f"{a}.bv"],
            s[f"{a}.wo"], s[f"{a}.bo"], s[f"{a}.ln.g"], s[f"{a}.ln.b"],
            heads=self.config.heads, mask=mask)

    def project_and_encode(self, video, query, qmask=None, rng=None, training=False):
        """Encode a batch: ``video`` (B, n, d_v), ``query`` (B, m, d_q), ``qmask`` (B, m)."""
        c, s, E, P = self.config, self.store, self.encoder_prefix, self.prefix
        video = np.asarray(video, dtype=np.float64)
        query = np.asarray(query, dtype=np.float64)
        B, n, _ = video.shape
        m = query.shape[1]
        if m > c.m_max:
            raise ContractError(f"query length {m} exceeds m_max={c.m_max}")
        if n > c.pos_len:
            raise ContractError(f"video length {n} exceeds positional table ({c.pos_len})")
        if qmask is None:
            qmask = np.ones((B, m), dtype=bool)
        pos = s[f"{P}.pos"]
        v = ops.add(layers.linear(video, s[f"{E}.ffn_v.w"], s[f"{E}.ffn_v.b"]), ops.getitem(pos, slice(0, n)))
        q = ops.add(layers.linear(query, s[f"{E}.ffn_q.w"], s[f"{E}.ffn_q.b"]), ops.getitem(pos, slice(0, m)))
        q = ops.mul(q, qmask[..., None].astype(np.float64))
        v = ops.dropout(v, c.dropout, rng, training)
        q = ops.dropout(q, c.dropout, rng, training)
        v_enc = self._encoder(v, "venc", None, rng, training)
        q_enc = self._encoder(q, "qenc", qmask, rng, training)
        return EncodedPair(v_enc, q_enc)

    def similarity(self, e):
        """Trilinear scores ``w_v.v_i + w_q.q_j + w_vq.(v_i * q_j)`` of shape (B, n, m)."""
        s, P = self.store, self.prefix
        v, q = e.v_enc, e.q_enc
        v_part = ops.matmul(v, s[f"{P}.cqa.w_v"])
        q_part = ops.swapaxes(ops.matmul(q, s[f"{P}.cqa.w_q"]), -1, -2)
        vq = ops.matmul(ops.mul(v, s[f"{P}.cqa.w_vq"]), ops.swapaxes(q, -1, -2))
        return ops.add(ops.add(vq, v_part), q_part)

    def context_query_attention(self, e, qmask=None, return_weights=False):
        s, P = self.store, self.prefix
        S = self.similarity(e)
        keep = None if qmask is None else qmask[:, None, :]
        S_r = ops.softmax(S, axis=2, mask=keep)  # over query tokens
        S_c = ops.softmax(S, axis=1)  # over clips
        A = ops.matmul(S_r, e.q_enc)
        Bm = ops.matmul(ops.matmul(S_r, ops.swapaxes(S_c, -1, -2)), e.v_enc)
        v = e.v_enc
        cat = ops.concat([v, A, ops.mul(v, A), ops.mul(v, Bm)], axis=-1)
        fused = FusedFeatures(layers.linear(cat, s[f"{P}.cqa.ffn.w"], s[f"{P}.cqa.ffn.b"]))
        if return_weights:
            return fused, S_r, S_c
        return fused

    def predict_spans(self, f, rng=None, training=False):
        """Start/end logits stacked as a (B, 2, n) Node."""
        s, P = self.store, self.prefix
        h1 = self._conv_block(f.v_qv, f"{P}.pred.start_block", None, rng, training)
        start = layers.linear(h1, s[f"{P}.pred.start.w"], s[f"{P}.pred.start.b"])
        h2 = self._conv_block(h1, f"{P}.pred.end_block", None, rng, training)
        end = layers.linear(h2, s[f"{P}.pred.end.w"], s[f"{P}.pred.end.b"])
        return ops.swapaxes(ops.concat([start, end], axis=-1), -1, -2)

    def forward(self, video, query, qmask=None, rng=None, training=False):
        """Returns ``(logits, encoded)`` where logits is a (B, 2, n) Node."""
        e = self.project_and_encode(video, query, qmask, rng, training)
        fused = self.context_query_attention(e, qmask)
        return self.predict_spans(fused, rng, training), e

    def distribution(self, video, query, qmask=None):
        """Eval-mode start/end probabilities as an array (B, 2, n)."""
        logits, _ = self.forward(video, query, qmask)
        return ops.softmax(logits, axis=-1).value


def decode_span(p):
    """Most probable (start, end) clip pair with start <= end."""
    idx = K.decode_spans(np.asarray(p.p_start)[None], np.asarray(p.p_end)[None])[0]
    return int(idx[0]), int(idx[1])


def decode_batch(probs):
    """``probs`` (B, 2, n) -> integer array (B, 2)."""
    probs = np.asarray(probs)
    return K.decode_spans(probs[:, 0], probs[:, 1])


def as_distribution(probs_row):
    return StartEndDistribution(np.asarray(probs_row[0]), np.asarray(probs_row[1]))
