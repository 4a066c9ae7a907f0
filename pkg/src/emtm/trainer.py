"""Optimization loop, checkpoints and student-only inference."""

import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import build_shared_models, compose_losses, hidden_alignment
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .kau import KAU
from .metrics import MetricReport, evaluate
from .numerics import Node, ParameterStore, backward, no_grad, ops
from .student_net import ModelConfig, StudentNet, as_distribution, decode_batch
from .unify import ClipGrid

logger = logging.getLogger(__name__)

EVAL_CHUNK = 50


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global norm; 0 disables
    use_shared_encoder: bool = True
    use_label_distillation: bool = True
    teachers: tuple = None  # offline teacher indices; None means all
    seed: int = 0

    def __post_init__(self):
        if self.teachers is not None:
            self.teachers = tuple(int(t) for t in self.teachers)
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["teachers"] = None if self.teachers is None else list(self.teachers)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def variant(self):
        se, ld = self.use_shared_encoder, self.use_label_distillation
        if se and ld:
            return "EMTM"
        if ld:
            return "EMTM w/o SE"
        if se:
            return "EMTM w/o LD"
        return "EMTM w/o SE-LD"


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class Bundle:
    """Student plus, depending on the ablation, its co-trained twin and the KAU."""

    config: ModelConfig
    store: ParameterStore
    student: StudentNet
    teacher: StudentNet = None
    kau: KAU = None
    shared_names: list = field(default_factory=list)
    teacher_subset: tuple = ()
    use_distillation: bool = True

    @property
    def structure(self):
        return {"twin": self.teacher is not None,
                "shared": bool(self.shared_names),
                "kau_b": None if self.kau is None else self.kau.b,
                "teacher_subset": list(self.teacher_subset),
                "use_distillation": self.use_distillation}


def build_bundle(config, tcfg, n_offline):
    """Wire the models for the ablation selected by ``tcfg``.

    Without shared encoders *and* without label distillation only the
    student exists.  Otherwise the isomorphic teacher is built (sharing
    encoders when enabled) and the KAU gates the offline teachers plus the
    twin.
    """
    subset = tuple(range(n_offline)) if tcfg.teachers is None else tcfg.teachers
    if any(t < 0 or t >= n_offline for t in subset):
        raise ConfigError(f"teacher subset {subset} out of range for {n_offline} teachers")
    store = ParameterStore(config.seed)
    se, ld = tcfg.use_shared_encoder, tcfg.use_label_distillation
    if not se and not ld:
        student = StudentNet(config, store, prefix="student", encoder_prefix="shared")
        return Bundle(config, store, student, teacher_subset=subset, use_distillation=False)
    student, teacher, manifest = build_shared_models(config, store, shared=se)
    kau = KAU(config, store, b=len(subset) + 1)
    return Bundle(config, store, student, teacher, kau, manifest, subset, ld)


def _bundle_from_structure(config, structure):
    store = ParameterStore(config.seed)
    if not structure["twin"]:
        student = StudentNet(config, store, prefix="student", encoder_prefix="shared")
        return Bundle(config, store, student, teacher_subset=tuple(structure["teacher_subset"]),
                      use_distillation=False)
    student, teacher, manifest = build_shared_models(config, store, shared=structure["shared"])
    kau = KAU(config, store, b=structure["kau_b"]) if structure["kau_b"] else None
    return Bundle(config, store, student, teacher, kau, manifest,
                  tuple(structure["teacher_subset"]), structure["use_distillation"])


# ---------------------------------------------------------------------------
# losses for one minibatch
# ---------------------------------------------------------------------------


def forward_losses(bundle, batch, rng=None, training=False, frozen=None):
    """Build the graph for one minibatch.

    Returns ``(breakdown, captured)``.  ``captured`` holds the values that
    enter the graph detached (twin distribution in the bank, KAU inputs,
    distillation target); passing it back as ``frozen`` replays them, which
    makes the loss an ordinary function of the parameters for gradient checks.
    """
    cfg = bundle.config
    st_logits, st_enc = bundle.student.forward(batch.video, batch.query, batch.qmask, rng, training)
    st_logp = ops.log_softmax(st_logits, axis=-1)
    captured = {}
    tc_logp, tc_enc, ens = None, None, None
    if bundle.teacher is not None:
        tc_logits, tc_enc = bundle.teacher.forward(batch.video, batch.query, batch.qmask, rng, training)
        tc_logp = ops.log_softmax(tc_logits, axis=-1)
    if bundle.kau is not None:
        twin = frozen["twin"] if frozen else np.exp(tc_logp.value)
        v_in = frozen["v_enc"] if frozen else st_enc.v_enc.value
        q_in = frozen["q_enc"] if frozen else st_enc.q_enc.value
        captured.update(twin=twin, v_enc=v_in, q_enc=q_in)
        parts = [] if batch.bank is None else [batch.bank[:, list(bundle.teacher_subset)]]
        bank = np.concatenate(parts + [twin[:, None]], axis=1)
        ens = bundle.kau.forward(Node(v_in), Node(q_in), bank, batch.qmask).ensemble
    target = None
    if ens is not None:
        target = frozen["ensemble"] if frozen else ens.value
        captured["ensemble"] = target
    breakdown, _ = compose_losses(st_logp, batch.labels, cfg.alpha, cfg.temperature, tc_logp, ens,
                                  use_distillation=bundle.use_distillation,
                                  direction=cfg.kl_direction, target=target)
    if cfg.align_weight > 0 and tc_enc is not None:
        total = ops.add(breakdown.node, ops.mul(hidden_alignment(st_enc, tc_enc), cfg.align_weight))
        breakdown.node, breakdown.total = total, float(total.value)
    return breakdown, captured


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of ``params`` (name -> array)."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"{name}: moment shape {m.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_arrays(student, data, threads=1):
    """Eval-mode probabilities (N, 2, n) computed in fixed chunks."""
    chunks = [list(range(i, min(i + EVAL_CHUNK, len(data)))) for i in range(0, len(data), EVAL_CHUNK)]

    def run(idx):
        part = data.take(idx)
        with no_grad():
            return student.distribution(part.video, part.query, part.qmask)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return np.concatenate(results, axis=0)


def spans_to_times(idx, durations, n):
    """Clip index pairs -> clip-centre times in seconds."""
    return (idx + 0.5) * (durations[:, None] / n)


def evaluate_student(student, data, threads=1):
    probs = predict_arrays(student, data, threads)
    idx = decode_batch(probs)
    times = spans_to_times(idx, data.durations, probs.shape[-1])
    report = evaluate([tuple(t) for t in times], [tuple(t) for t in data.times])
    return report, times, probs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"EMTM-CHECKPOINT 1\n"


@dataclass
class Checkpoint:
    params: dict  # name -> array
    config: ModelConfig
    train_config: TrainConfig
    structure: dict
    epoch: int
    best_metric: float

    @property
    def fingerprint(self):
        blob = json.dumps({"model": self.config.to_dict(), "train": self.train_config.to_dict(),
                           "structure": self.structure}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_bytes(self):
        entries, offset, blobs = [], 0, []
        for name, arr in self.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"fingerprint": self.fingerprint, "config": self.config.to_dict(),
                  "train_config": self.train_config.to_dict(), "structure": self.structure,
                  "epoch": self.epoch, "best_metric": self.best_metric, "params": entries}
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            buf.write(raw)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data, path=None):
        if not data.startswith(MAGIC):
            raise ParseError("not an EMTM checkpoint (bad magic)", path, 1)
        rest = data[len(MAGIC):]
        nl = rest.find(b"\n")
        if nl < 0:
            raise ParseError("truncated checkpoint header", path, 2)
        try:
            header = json.loads(rest[:nl])
        except ValueError as exc:
            raise ParseError(f"bad checkpoint header ({exc})", path, 2) from exc
        body = rest[nl + 1:]
        params = {}
        for e in header["params"]:
            raw = body[e["offset"]:e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise ParseError(f"truncated blob for {e['name']}", path)
            params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        ckpt = cls(params, ModelConfig.from_dict(header["config"]),
                   TrainConfig.from_dict(header["train_config"]), header["structure"],
                   header["epoch"], header["best_metric"])
        if ckpt.fingerprint != header["fingerprint"]:
            raise ParseError("checkpoint fingerprint does not match its configuration", path)
        return ckpt

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes(), path)


def load_bundle(checkpoint):
    bundle = _bundle_from_structure(checkpoint.config, checkpoint.structure)
    bundle.store.load_state_dict(checkpoint.params)
    return bundle


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _check_finite(breakdown, epoch, step):
    vals = breakdown.as_dict()
    bad = [k for k, v in vals.items() if not np.isfinite(v)]
    if bad:
        raise NumericalError(f"non-finite loss at epoch {epoch} step {step}: "
                             + ", ".join(f"{k}={vals[k]}" for k in bad))


def train(bundle, train_data, val_data, tcfg, on_epoch=None):
    """Minimize the four-term objective with Adam and early stopping on val mIoU.

    Returns ``(checkpoint, log)`` where the checkpoint holds the best epoch.
    """
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    if bundle.kau is not None and train_data.bank is None and bundle.teacher_subset:
        raise ConfigError("training data carries no teacher predictions")
    store = bundle.store
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])
    drop_rng = np.random.default_rng([tcfg.seed, 2])
    state = AdamState()
    names = store.names()
    best, best_epoch, best_params, stale = -np.inf, 0, store.state_dict(), 0
    log = []
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_data))
        sums = {"l_st": 0.0, "l_tc": 0.0, "l_ens": 0.0, "l_dis": 0.0, "total": 0.0}
        steps = 0
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = train_data.take(order[start:start + tcfg.batch_size])
            store.zero_grad()
            breakdown, _ = forward_losses(bundle, batch, drop_rng, training=True)
            _check_finite(breakdown, epoch, step)
            backward(breakdown.node)
            grads = {name: store[name].grad for name in names}
            clip_global_norm(grads, tcfg.grad_clip)
            adam_step({name: store[name].value for name in names}, grads, state, tcfg.lr,
                      tcfg.beta1, tcfg.beta2, tcfg.eps)
            for k, v in breakdown.as_dict().items():
                sums[k] += v
            steps += 1
        report, _, _ = evaluate_student(bundle.student, val_data)
        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()},
                  "val_miou": report.miou, **{f"val_r1@{t}": v for t, v in report.r1.items()}}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d total=%.4f val mIoU=%.2f", epoch, record["total"], report.miou)
        if report.miou > best:
            best, best_epoch, best_params, stale = report.miou, epoch, store.state_dict(), 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    store.load_state_dict(best_params)
    ckpt = Checkpoint(best_params, bundle.config, tcfg, bundle.structure, best_epoch, float(best))
    return ckpt, log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    t_start: float
    t_end: float
    i_start: int
    i_end: int
    distribution: object  # StartEndDistribution


def infer(model, sample):
    """Student-only prediction for one sample; ``model`` is a Checkpoint or Bundle."""
    bundle = load_bundle(model) if isinstance(model, Checkpoint) else model
    cfg = bundle.config
    if sample.video.shape[1] != cfg.d_v or sample.query.shape[1] != cfg.d_q:
        raise ContractError(f"feature dims ({sample.video.shape[1]}, {sample.query.shape[1]}) "
                            f"do not match the model ({cfg.d_v}, {cfg.d_q})")
    if sample.n != cfg.n:
        raise ContractError(f"sample has n={sample.n}, model expects n={cfg.n}")
    m = sample.m
    if m > cfg.m_max:
        raise ContractError(f"query length {m} exceeds m_max={cfg.m_max}")
    query = np.zeros((1, cfg.m_max, cfg.d_q))
    query[0, :m] = sample.query
    mask = np.zeros((1, cfg.m_max), dtype=bool)
    mask[0, :m] = True
    with no_grad():
        probs = bundle.student.distribution(sample.video[None], query, mask)
    i_s, i_e = decode_batch(probs)[0]
    grid = ClipGrid(sample.n, sample.duration)
    return Prediction(grid.index_to_time(i_s), grid.index_to_time(i_e), int(i_s), int(i_e),
                      as_distribution(probs[0]))
