"""Grounding quality metrics and closed-form cost accounting.

FLOP conventions (per sample, batch size 1; one multiply-add counts as two):

* linear ``rows x d_in -> d_out``: ``2 * rows * d_in * d_out``
* conv1d: ``2 * k * c_in * c_out * n``
* self-attention over ``L`` tokens: four projections plus ``QK^T`` and
  ``attention @ V`` (``2 * L * L * d`` each), softmax ``3 * heads * L * L``
* layer norm ``5`` per element, softmax ``3`` per element, relu / residual /
  elementwise products ``1`` per element

Params exclude embedding tables (the positional tables here; word vectors
are input features, not parameters).
"""

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

THRESHOLDS = (0.3, 0.5, 0.7)


def iou(pred, gt):
    """Temporal intersection over union of two ordered (start, end) spans."""
    ps, pe = pred
    gs, ge = gt
    if ps > pe or gs > ge:
        raise ContractError(f"iou needs ordered spans, got {pred} and {gt}")
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = max(pe, ge) - min(ps, gs)
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class MetricReport:
    r1: dict  # threshold -> percentage
    miou: float
    sumacc: float
    count: int = 0

    def as_dict(self):
        out = {f"r1@{t}": v for t, v in self.r1.items()}
        out.update(miou=self.miou, sumacc=self.sumacc, count=self.count)
        return out

    def table(self):
        cols = [f"R1@{t}" for t in self.r1] + ["mIoU", "sumACC"]
        vals = list(self.r1.values()) + [self.miou, self.sumacc]
        head = " ".join(f"{c:>8}" for c in cols)
        row = " ".join(f"{v:8.2f}" for v in vals)
        return f"{head}\n{row}"


def evaluate(predictions, labels, thresholds=THRESHOLDS, sumacc="caption"):
    """R@1 at each IoU threshold (strictly greater), mean IoU and sumACC, as percentages.

    ``sumacc="caption"`` sums R1@0.5 and R1@0.7; ``"body"`` sums R1@0.3 and R1@0.5.
    """
    if len(predictions) != len(labels):
        raise ContractError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not len(labels):
        raise ContractError("cannot evaluate an empty prediction set")
    ious = np.array([iou(p, g) for p, g in zip(predictions, labels)])
    r1 = {t: 100.0 * int(np.count_nonzero(ious > t)) / len(ious) for t in thresholds}
    if sumacc == "caption":
        s = r1[0.5] + r1[0.7]
    elif sumacc == "body":
        s = r1[0.3] + r1[0.5]
    else:
        raise ContractError(f"unknown sumACC convention {sumacc!r}")
    return MetricReport(r1, 100.0 * float(ious.mean()), s, len(labels))


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    flops: int
    params: int
    time_ms: float = None  # median per-sample latency
    time_iqr_ms: float = None
    breakdown: dict = field(default_factory=dict)  # component -> flops

    def as_dict(self):
        return {"flops": self.flops, "params": self.params, "time_ms": self.time_ms,
                "time_iqr_ms": self.time_iqr_ms}


def _attn_flops(L, d, heads):
    return 4 * 2 * L * d * d + 2 * (2 * L * L * d) + 3 * heads * L * L + 5 * L * d + L * d


def _block_flops(L, d, k):
    # conv, layer norm, relu, residual
    return 2 * k * d * d * L + 5 * L * d + L * d + L * d


def _encoder_flops(cfg, L):
    return cfg.encoder_blocks * _block_flops(L, cfg.d, cfg.conv_kernel) + _attn_flops(L, cfg.d, cfg.heads)


def student_flops(cfg, m=None):
    """Per-component FLOPs of one student forward pass through decoding."""
    n, d = cfg.n, cfg.d
    m = cfg.m_max if m is None else m
    out = {
        "projection": 2 * n * cfg.d_v * d + 2 * m * cfg.d_q * d + n * d + m * d,
        "visual_encoder": _encoder_flops(cfg, n),
        "query_encoder": _encoder_flops(cfg, m),
    }
    sim = 2 * n * d + 2 * m * d + n * d + 2 * n * m * d + 2 * n * m
    attn = 3 * n * m * 2 + 2 * n * m * d + 2 * n * m * n + 2 * n * n * d
    out["context_query_attention"] = sim + attn + 2 * n * d + 2 * n * 4 * d * d
    out["predictor"] = 2 * _block_flops(n, d, cfg.conv_kernel) + 2 * (2 * n * d) + 3 * 2 * n
    out["decode"] = n * (n + 1) // 2
    return out


def kau_flops(cfg, b, m=None):
    n, d = cfg.n, cfg.d
    m = cfg.m_max if m is None else m
    convs = sum(2 * k * d * d * n for k in cfg.kau_kernels)
    width = (len(cfg.kau_kernels) + 1) * d
    pool = len(cfg.kau_kernels) * n * d + m * d
    fc = 2 * width * 2 * b * n
    gate = 3 * 2 * b * n + 2 * b * 2 * n + 2 * 2 * n
    return convs + pool + fc + gate


def _block_params(d, k):
    return k * d * d + d + 2 * d


def _attn_params(d):
    return 4 * (d * d + d) + 2 * d


def encoder_params(cfg):
    d = cfg.d
    proj = cfg.d_v * d + d + cfg.d_q * d + d
    stream = cfg.encoder_blocks * _block_params(d, cfg.conv_kernel) + _attn_params(d)
    return proj + 2 * stream


def private_params(cfg, include_embeddings=False):
    d = cfg.d
    cqa = 3 * d + 4 * d * d + d
    pred = 2 * (_block_params(d, cfg.conv_kernel) + d + 1)
    emb = cfg.pos_len * d if include_embeddings else 0
    return cqa + pred + emb


def count_cost(cfg, path="inference", b=None, shared=True):
    """Closed-form FLOPs and parameter count.

    The inference path is the student alone.  The training path adds the
    isomorphic teacher (whose encoders are free when shared) and the KAU
    over ``b`` teachers.
    """
    if path not in ("inference", "training"):
        raise ContractError(f"unknown path {path!r}")
    breakdown = {f"student.{k}": v for k, v in student_flops(cfg).items()}
    params = encoder_params(cfg) + private_params(cfg)
    if path == "training":
        breakdown.update({f"teacher.{k}": v for k, v in student_flops(cfg).items()
                          if k != "decode"})
        params += private_params(cfg) + (0 if shared else encoder_params(cfg))
        if b:
            from .kau import kau_parameter_count
            breakdown["kau"] = kau_flops(cfg, b)
            params += kau_parameter_count(cfg, b)
    return CostReport(int(sum(breakdown.values())), int(params), breakdown=breakdown)


def measure_latency(fn, runs=100, warmup=10):
    """Median and interquartile range (ms) of ``fn()`` wall time."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    q = statistics.quantiles(times, n=4)
    return statistics.median(times), q[2] - q[0]


def measure_student_latency(cfg, runs=100, warmup=10, seed=0):
    """Time in-memory features -> decoded span for a freshly initialized student."""
    from .numerics import ParameterStore, no_grad
    from .student_net import StudentNet, decode_batch

    store = ParameterStore(seed)
    student = StudentNet(cfg, store)
    rng = np.random.default_rng(seed)
    video = rng.normal(size=(1, cfg.n, cfg.d_v))
    query = rng.normal(size=(1, cfg.m_max, cfg.d_q))
    mask = np.ones((1, cfg.m_max), dtype=bool)

    def run():
        with no_grad():
            decode_batch(student.distribution(video, query, mask))

    return measure_latency(run, runs, warmup)


def fmt_flops(x):
    if x <= 0:
        return "0"
    exp = int(math.floor(math.log10(x) / 3))
    unit = ["", "K", "M", "G", "T"][min(exp, 4)]
    return f"{x / 1000 ** min(exp, 4):.3f}{unit}"
