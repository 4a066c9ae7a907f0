"""Losses for co-training the student, its isomorphic teacher and the KAU.

The objective is ``l_st + l_tc + l_ens + alpha * l_dis``: cross-entropy of the
student, of the isomorphic teacher and of the KAU ensemble against the hard
boundary labels, plus a temperature-softened KL term pulling the student
toward the (gradient-detached) ensemble.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import Node, ParameterStore, ops
from .student_net import StudentNet
from .unify import StartEndDistribution

LOG_FLOOR = 1e-12


@dataclass
class HardLabels:
    y_start: np.ndarray
    y_end: np.ndarray

    @classmethod
    def from_indices(cls, i_s, i_e, n):
        if not 0 <= i_s <= i_e < n:
            raise ContractError(f"label indices ({i_s}, {i_e}) invalid for n={n}")
        ys, ye = np.zeros(n), np.zeros(n)
        ys[i_s] = 1.0
        ye[i_e] = 1.0
        return cls(ys, ye)

    def indices(self):
        return int(np.argmax(self.y_start)), int(np.argmax(self.y_end))


@dataclass
class LossBreakdown:
    l_st: float
    l_tc: float
    l_ens: float
    l_dis: float
    total: float
    node: Node = None  # scalar to differentiate
    parts: dict = None  # term name -> scalar Node

    def as_dict(self):
        return {"l_st": self.l_st, "l_tc": self.l_tc, "l_ens": self.l_ens,
                "l_dis": self.l_dis, "total": self.total}


def _label_array(y, n=None):
    """Normalize labels to an int array (B, 2) of (start, end) indices."""
    if isinstance(y, HardLabels):
        return np.array([y.indices()], dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    return y[None] if y.ndim == 1 else y


def _one_hot(idx, n):
    oh = np.zeros(idx.shape + (n,))
    np.put_along_axis(oh, idx[..., None], 1.0, axis=-1)
    return oh


def _prob_node(p):
    """StartEndDistribution, (2, n) or (B, 2, n) array or Node -> (B, 2, n) Node."""
    if isinstance(p, StartEndDistribution):
        return Node(np.stack([p.p_start, p.p_end])[None])
    if isinstance(p, Node):
        return p if p.ndim == 3 else ops.reshape(p, (1,) + p.shape)
    p = np.asarray(p, dtype=np.float64)
    return Node(p[None] if p.ndim == 2 else p)


def ce_from_log_probs(logp, y):
    """Mean over batch and the two boundary channels of ``-log p[label]``."""
    idx = _label_array(y)
    pick = ops.sum(ops.mul(logp, _one_hot(idx, logp.shape[-1])), axis=-1)
    return ops.mul(ops.mean(pick), -1.0)


def ce_loss(p, y):
    """Cross-entropy of probabilities ``p`` against hard labels (log clamped at 1e-12)."""
    return ce_from_log_probs(ops.log(_prob_node(p), floor=LOG_FLOOR), y)


def ce_from_logits(logits, y):
    return ce_from_log_probs(ops.log_softmax(logits, axis=-1), y)


def _check_t(t):
    if not t > 0:
        raise ConfigError(f"temperature must be positive, got {t}")


def soften(p, t):
    """``q[i] ~ p[i] ** (1/t)`` per channel; ``t = 1`` leaves ``p`` unchanged."""
    _check_t(t)
    out = []
    for v in (p.p_start, p.p_end):
        logp = np.log(np.maximum(np.asarray(v, dtype=np.float64), LOG_FLOOR)) / t
        q = np.exp(logp - logp.max())
        out.append(q / q.sum())
    return StartEndDistribution(out[0], out[1])


def soften_array(p, t):
    _check_t(t)
    logp = np.log(np.maximum(p, LOG_FLOOR)) / t
    q = np.exp(logp - logp.max(axis=-1, keepdims=True))
    return q / q.sum(axis=-1, keepdims=True)


def kl_from_log_probs(student_logp, ensemble, t, direction="ensemble_first"):
    """Softened KL between the student (log-probabilities Node) and a fixed ensemble.

    The ensemble is read by value, so no gradient reaches it.  The result is
    summed over the two channels and averaged over the batch.
    """
    _check_t(t)
    ens = ensemble.value if isinstance(ensemble, Node) else np.asarray(ensemble, dtype=np.float64)
    if ens.ndim == 2:
        ens = ens[None]
    q = soften_array(ens, t)
    log_q = np.log(np.maximum(q, LOG_FLOOR))
    log_s = ops.log_softmax(ops.mul(student_logp, 1.0 / t), axis=-1)
    B = q.shape[0]
    if direction == "ensemble_first":
        ent = np.where(q > 0, q * log_q, 0.0).sum()
        cross = ops.sum(ops.mul(log_s, q))
        return ops.mul(ops.sub(ent, cross), 1.0 / B)
    if direction == "student_first":
        s = ops.exp(log_s)
        return ops.mul(ops.sum(ops.mul(s, ops.sub(log_s, log_q))), 1.0 / B)
    raise ConfigError(f"unknown KL direction {direction!r}")


def kl_distill_loss(student, ensemble, t, direction="ensemble_first"):
    """KL distillation loss from probability inputs (distributions, arrays or Nodes)."""
    logp = ops.log(_prob_node(student), floor=LOG_FLOOR)
    ens = ensemble.p_tilde if hasattr(ensemble, "p_tilde") else ensemble
    ens = _prob_node(ens).value
    return kl_from_log_probs(logp, ens, t, direction)


def compose_losses(student_logp, y, alpha, t, teacher_logp=None, ensemble=None,
                   use_distillation=True, direction="ensemble_first", target=None):
    """Assemble the four-term objective from log-probability Nodes.

    ``ensemble`` is the KAU output as a probability Node; absent terms
    contribute zero.  ``target`` overrides the (detached) distillation
    target, which otherwise is the ensemble's current value.
    """
    l_st = ce_from_log_probs(student_logp, y)
    parts = {"l_st": l_st}
    total = l_st
    if teacher_logp is not None:
        parts["l_tc"] = ce_from_log_probs(teacher_logp, y)
        total = ops.add(total, parts["l_tc"])
    if ensemble is not None:
        parts["l_ens"] = ce_from_log_probs(ops.log(ensemble, floor=LOG_FLOOR), y)
        total = ops.add(total, parts["l_ens"])
        if use_distillation:
            target = ensemble.value if target is None else target
            parts["l_dis"] = kl_from_log_probs(student_logp, target, t, direction)
            total = ops.add(total, ops.mul(parts["l_dis"], alpha))

    def val(k):
        return float(parts[k].value) if k in parts else 0.0

    return LossBreakdown(val("l_st"), val("l_tc"), val("l_ens"), val("l_dis"),
                         float(total.value), total, parts), parts


def total_loss(student_p, teacher_p, ensemble_p, y, config):
    """Four-term objective from probability inputs; ``teacher_p``/``ensemble_p`` may be None."""
    st = ops.log(_prob_node(student_p), floor=LOG_FLOOR)
    tc = None if teacher_p is None else ops.log(_prob_node(teacher_p), floor=LOG_FLOOR)
    ens = None if ensemble_p is None else _prob_node(ensemble_p)
    breakdown, _ = compose_losses(st, y, config.alpha, config.temperature, tc, ens,
                                  direction=config.kl_direction)
    return breakdown


def build_shared_models(config, store=None, shared=True):
    """Create the student and its isomorphic teacher.

    With ``shared`` the projections and both encoders resolve to the same
    parameter nodes in the two models.  Returns ``(student, teacher, manifest)``
    where ``manifest`` lists the shared parameter names.
    """
    if store is None:
        store = ParameterStore(config.seed)
    if shared:
        student = StudentNet(config, store, prefix="student", encoder_prefix="shared")
        teacher = StudentNet(config, store, prefix="teacher", encoder_prefix="shared")
        manifest = student.encoder_names()
    else:
        student = StudentNet(config, store, prefix="student")
        teacher = StudentNet(config, store, prefix="teacher")
        manifest = []
    return student, teacher, manifest


def hidden_alignment(student_enc, teacher_enc):
    """Mean squared gap between two models' encodings (optional, off by default)."""
    dv = ops.sub(student_enc.v_enc, teacher_enc.v_enc)
    dq = ops.sub(student_enc.q_enc, teacher_enc.q_enc)
    return ops.add(ops.mean(ops.mul(dv, dv)), ops.mean(ops.mul(dq, dq)))
