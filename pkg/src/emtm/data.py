"""Synthetic grounding data, simulated teachers and on-disk formats.

A synthetic sample hides a random pattern vector inside one contiguous run
of clips; the query is a noisy projection of the same pattern.  Label times
sit on clip centres so that clip indices and times round-trip exactly.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ParseError
from .unify import (FORMATS, ClipGrid, Map2D, ProposalList, RegressionPair, SpanLogits,
                    format_of, unify)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass
class Sample:
    sample_id: str
    video: np.ndarray  # (n, d_v)
    query: np.ndarray  # (m, d_q)
    t_start: float
    t_end: float
    duration: float

    def __post_init__(self):
        if not 0 <= self.t_start < self.t_end <= self.duration:
            raise FormatError(f"sample {self.sample_id}: need 0 <= t_start < t_end <= duration, "
                              f"got ({self.t_start}, {self.t_end}, {self.duration})")

    @property
    def n(self):
        return self.video.shape[0]

    @property
    def m(self):
        return self.query.shape[0]

    @property
    def grid(self):
        return ClipGrid(self.n, self.duration)

    def label_indices(self):
        g = self.grid
        return g.time_to_index(self.t_start), g.time_to_index(self.t_end)


@dataclass
class SyntheticSpec:
    train: int = 1000
    val: int = 200
    test: int = 200
    n: int = 32
    d_v: int = 64
    d_q: int = 50
    m_min: int = 4
    m_max: int = 10
    snr: float = 1.0
    min_fraction: float = 0.2
    max_fraction: float = 0.6
    duration_min: float = 20.0
    duration_max: float = 40.0
    query_noise: float = 0.5
    seed: int = 0

    def validate(self):
        if min(self.train, self.val, self.test) < 0 or self.train + self.val + self.test == 0:
            raise ConfigError("split sizes must be non-negative and not all zero")
        if self.n < 2 or self.d_v < 1 or self.d_q < 1:
            raise ConfigError("n must be >= 2 and feature sizes positive")
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError(f"bad query length range [{self.m_min}, {self.m_max}]")
        if not self.snr > 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if not 0 < self.min_fraction <= self.max_fraction <= 1:
            raise ConfigError(f"segment fractions must satisfy 0 < min <= max <= 1, got "
                              f"[{self.min_fraction}, {self.max_fraction}]")
        lo, hi = self.segment_length_range()
        if lo > hi:
            raise ConfigError(f"no segment length fits fractions [{self.min_fraction}, "
                              f"{self.max_fraction}] at n={self.n}")
        if not 0 < self.duration_min <= self.duration_max:
            raise ConfigError("duration range must be positive and ordered")
        return self

    def segment_length_range(self):
        # segments span at least two clips so that start < end
        lo = max(2, math.ceil(self.min_fraction * self.n - 1e-9))
        hi = math.floor(self.max_fraction * self.n + 1e-9)
        return lo, hi


@dataclass
class Dataset:
    splits: dict  # split name -> list of Sample
    spec: SyntheticSpec = None

    def __getitem__(self, split):
        return self.splits[split]

    def all_samples(self):
        return [s for name in SPLITS for s in self.splits.get(name, [])]


def _projection(spec):
    rng = np.random.default_rng([spec.seed, 7919])
    return rng.normal(size=(spec.d_v, spec.d_q)) / np.sqrt(spec.d_v)


def _make_sample(spec, split, index, proj):
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    n = spec.n
    duration = float(rng.uniform(spec.duration_min, spec.duration_max))
    lo, hi = spec.segment_length_range()
    length = int(rng.integers(lo, hi + 1))
    s = int(rng.integers(0, n - length + 1))
    e = s + length - 1
    pattern = rng.normal(size=spec.d_v)
    video = rng.normal(size=(n, spec.d_v))
    video[s:e + 1] += spec.snr * pattern
    m = int(rng.integers(spec.m_min, spec.m_max + 1))
    query = (pattern @ proj)[None, :] + spec.query_noise * rng.normal(size=(m, spec.d_q))
    grid = ClipGrid(n, duration)
    return Sample(f"{split}-{index:05d}", video, query, grid.index_to_time(s),
                  grid.index_to_time(e), duration)


def generate_dataset(spec):
    spec.validate()
    proj = _projection(spec)
    counts = {"train": spec.train, "val": spec.val, "test": spec.test}
    splits = {name: [_make_sample(spec, name, i, proj) for i in range(counts[name])]
              for name in SPLITS}
    return Dataset(splits, spec)


# ---------------------------------------------------------------------------
# simulated teachers
# ---------------------------------------------------------------------------


@dataclass
class SimulatedTeacherSpec:
    format: str = "span"
    noise: float = 1.0  # boundary noise std, clips
    bias: float = 0.0  # systematic shift, clips
    k: int = 5  # proposals per sample
    sharpness: float = 1.0

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"unknown teacher format {self.format!r}; expected one of {FORMATS}")
        if self.noise < 0:
            raise ConfigError(f"teacher noise must be non-negative, got {self.noise}")
        if self.k < 1:
            raise ConfigError(f"proposal count must be >= 1, got {self.k}")
        if not self.sharpness > 0:
            raise ConfigError(f"sharpness must be positive, got {self.sharpness}")


def simulate_teacher(sample, tspec, grid, rng):
    """Perturb the true boundaries and emit them in ``tspec.format``."""
    n = grid.n
    i_s, i_e = grid.time_to_index(sample.t_start), grid.time_to_index(sample.t_end)
    mu_s = i_s + tspec.bias + tspec.noise * rng.normal()
    mu_e = i_e + tspec.bias + tspec.noise * rng.normal()
    mu_s, mu_e = sorted((min(max(mu_s, 0.0), n - 1.0), min(max(mu_e, 0.0), n - 1.0)))
    idx = np.arange(n, dtype=np.float64)
    a = tspec.sharpness

    def to_time(mu):
        return min(max((mu + 0.5) * grid.duration / n, 0.0), grid.duration)

    if tspec.format == "span":
        return SpanLogits(-a * (idx - mu_s) ** 2 / 2, -a * (idx - mu_e) ** 2 / 2)
    if tspec.format == "map2d":
        S = -a * ((idx[:, None] - mu_s) ** 2 + (idx[None, :] - mu_e) ** 2) / 2
        return Map2D(S)
    if tspec.format == "regression":
        return RegressionPair(to_time(mu_s), to_time(mu_e))
    rows = [(to_time(mu_s), to_time(mu_e), 1.0)]
    for _ in range(tspec.k - 1):
        ds, de = tspec.noise * rng.normal(size=2)
        cs, ce = sorted((min(max(mu_s + ds, 0.0), n - 1.0), min(max(mu_e + de, 0.0), n - 1.0)))
        rows.append((to_time(cs), to_time(ce), float(np.exp(-a * (ds * ds + de * de) / 2))))
    return ProposalList(np.array(rows))


def simulate_teachers(samples, tspecs, seed):
    """Outputs for every (teacher, sample); deterministic given ``seed``."""
    out = []
    for t, tspec in enumerate(tspecs):
        rows = []
        for i, s in enumerate(samples):
            rng = np.random.default_rng([seed, 104729, t, _sample_key(s.sample_id, i)])
            rows.append((s.sample_id, simulate_teacher(s, tspec, s.grid, rng), s.grid))
        out.append(rows)
    return out


def _sample_key(sample_id, fallback):
    head, _, tail = sample_id.rpartition("-")
    if tail.isdigit() and head in _SPLIT_CODE:
        return _SPLIT_CODE[head] * 10_000_000 + int(tail)
    return fallback


# ---------------------------------------------------------------------------
# text encoding helpers
# ---------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise FormatError(f"cannot serialize non-finite number {x}")
        return format(float(x), ".16e")
    if isinstance(x, str):
        return json.dumps(x)
    if x is None:
        return "null"
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps_record(obj):
    """One JSON line; every float carries 17 significant digits."""
    return _fmt(obj)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def save_features(dataset, root):
    """Write ``manifest.jsonl`` plus little-endian float64 payloads under ``root``."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for split in SPLITS:
        for s in dataset.splits.get(split, []):
            vpath = f"features/{s.sample_id}.video.f64"
            qpath = f"features/{s.sample_id}.query.f64"
            np.ascontiguousarray(s.video, dtype="<f8").tofile(root / vpath)
            np.ascontiguousarray(s.query, dtype="<f8").tofile(root / qpath)
            lines.append(dumps_record({
                "id": s.sample_id, "split": split, "n": s.n, "m": s.m,
                "d_v": s.video.shape[1], "d_q": s.query.shape[1], "duration": s.duration,
                "t_start": s.t_start, "t_end": s.t_end, "video": vpath, "query": qpath}))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    if dataset.spec is not None:
        (root / "spec.json").write_text(json.dumps(asdict(dataset.spec), indent=2, sort_keys=True) + "\n")


def _read_payload(path, shape, line, sid):
    try:
        arr = np.fromfile(path, dtype="<f8")
    except OSError as exc:
        raise ParseError(f"cannot read payload {path}: {exc}", line=line, sample_id=sid) from exc
    if arr.size != int(np.prod(shape)):
        raise ParseError(f"payload {path} has {arr.size} values, expected {shape}",
                         line=line, sample_id=sid)
    return arr.reshape(shape).astype(np.float64)


def load_features(root):
    root = Path(root)
    path = root / MANIFEST
    splits = {name: [] for name in SPLITS}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            sid = None
            try:
                rec = json.loads(raw)
                sid = rec.get("id")
                n, m = int(rec["n"]), int(rec["m"])
                video = _read_payload(root / rec["video"], (n, int(rec["d_v"])), lineno, sid)
                query = _read_payload(root / rec["query"], (m, int(rec["d_q"])), lineno, sid)
                sample = Sample(sid, video, query, float(rec["t_start"]), float(rec["t_end"]),
                                float(rec["duration"]))
                split = rec.get("split", "train")
                if split not in splits:
                    raise ParseError(f"unknown split {split!r}", path, lineno, sid)
            except ParseError:
                raise
            except (ValueError, KeyError, TypeError, AttributeError, FormatError) as exc:
                raise ParseError(f"malformed manifest record ({exc})", path, lineno, sid) from exc
            splits[split].append(sample)
    spec = None
    if (root / "spec.json").exists():
        spec = SyntheticSpec(**json.loads((root / "spec.json").read_text()))
    return Dataset(splits, spec)


def manifest_sizes(dataset):
    """Sample id -> clip count, for validating teacher dumps."""
    return {s.sample_id: s.n for s in dataset.all_samples()}


# ---------------------------------------------------------------------------
# teacher dumps
# ---------------------------------------------------------------------------


def teacher_record(sample_id, output, grid):
    kind = format_of(output)
    rec = {"sample_id": sample_id, "format": kind, "n": grid.n, "duration": grid.duration}
    if kind == "span":
        rec["start_logits"] = np.asarray(output.start_logits)
        rec["end_logits"] = np.asarray(output.end_logits)
    elif kind == "map2d":
        rec["scores"] = np.asarray(output.scores)
    elif kind == "regression":
        rec["t_start"] = float(output.t_start)
        rec["t_end"] = float(output.t_end)
    else:
        rec["proposals"] = np.asarray(output.candidates)
    return rec


def save_teacher_dump(path, rows):
    """``rows``: iterable of (sample_id, TeacherOutput, ClipGrid)."""
    lines = [dumps_record(teacher_record(sid, out, grid)) for sid, out, grid in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_teacher(rec):
    kind = rec["format"]
    if kind == "span":
        return SpanLogits(np.array(rec["start_logits"], dtype=np.float64),
                          np.array(rec["end_logits"], dtype=np.float64))
    if kind == "map2d":
        return Map2D(np.array(rec["scores"], dtype=np.float64))
    if kind == "regression":
        return RegressionPair(float(rec["t_start"]), float(rec["t_end"]))
    if kind == "proposals":
        return ProposalList(np.array(rec["proposals"], dtype=np.float64).reshape(-1, 3))
    raise ParseError(f"unknown format tag {kind!r}")


def load_teacher_dump(path, sizes=None):
    """Parse a dump into (sample_id, TeacherOutput, ClipGrid) rows.

    ``sizes`` maps sample id to the manifest clip count; records whose ``n``
    disagrees, or that name an unknown sample, are rejected.
    """
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            sid = None
            try:
                rec = json.loads(raw)
                sid = rec.get("sample_id")
                kind = rec.get("format")
                if kind not in FORMATS:
                    raise ParseError(f"unknown format tag {kind!r}", path, lineno, sid)
                n = int(rec["n"])
                if sizes is not None:
                    if sid not in sizes:
                        raise ParseError("sample id not in dataset manifest", path, lineno, sid)
                    if sizes[sid] != n:
                        raise ParseError(f"record has n={n} but manifest has n={sizes[sid]}",
                                         path, lineno, sid)
                grid = ClipGrid(n, float(rec["duration"]))
                rows.append((sid, _parse_teacher(rec), grid))
            except ParseError as exc:
                if exc.line is None:
                    raise ParseError(str(exc), path, lineno, sid) from exc
                raise
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ParseError(f"malformed teacher record ({exc})", path, lineno, sid) from exc
    return rows


def unify_rows(rows, sigma=None):
    """Teacher dump rows -> {sample_id: StartEndDistribution}."""
    return {sid: unify(out, grid, sigma) for sid, out, grid in rows}


def teacher_dump_paths(root):
    d = Path(root) / "teachers"
    if not d.is_dir():
        return []
    return sorted(str(p) for p in d.glob("*.jsonl"))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class ArrayData:
    """Samples packed into dense arrays with queries padded to ``m_max``."""

    ids: list
    video: np.ndarray  # (N, n, d_v)
    query: np.ndarray  # (N, m_max, d_q)
    qmask: np.ndarray  # (N, m_max) bool
    labels: np.ndarray  # (N, 2) clip indices
    times: np.ndarray  # (N, 2) seconds
    durations: np.ndarray  # (N,)
    bank: np.ndarray = field(default=None)  # (N, b, 2, n) unified offline teachers

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        bank = None if self.bank is None else self.bank[idx]
        return ArrayData([self.ids[i] for i in idx], self.video[idx], self.query[idx],
                         self.qmask[idx], self.labels[idx], self.times[idx],
                         self.durations[idx], bank)


def pack(samples, m_max, banks=None):
    """``banks``: optional list (per teacher) of {sample_id: StartEndDistribution}."""
    if not samples:
        raise ConfigError("cannot pack an empty sample list")
    n = samples[0].n
    d_v, d_q = samples[0].video.shape[1], samples[0].query.shape[1]
    N = len(samples)
    video = np.zeros((N, n, d_v))
    query = np.zeros((N, m_max, d_q))
    qmask = np.zeros((N, m_max), dtype=bool)
    labels = np.zeros((N, 2), dtype=np.int64)
    for i, s in enumerate(samples):
        if s.n != n or s.video.shape[1] != d_v or s.query.shape[1] != d_q:
            raise FormatError(f"sample {s.sample_id} has inconsistent feature shapes")
        if s.m > m_max:
            raise FormatError(f"sample {s.sample_id} query length {s.m} exceeds m_max={m_max}")
        video[i] = s.video
        query[i, :s.m] = s.query
        qmask[i, :s.m] = True
        labels[i] = s.label_indices()
    times = np.array([[s.t_start, s.t_end] for s in samples])
    durations = np.array([s.duration for s in samples])
    bank = None
    if banks:
        bank = np.zeros((N, len(banks), 2, n))
        for t, dists in enumerate(banks):
            for i, s in enumerate(samples):
                if s.sample_id not in dists:
                    raise FormatError(f"teacher {t} has no prediction for sample {s.sample_id}")
                p = dists[s.sample_id]
                if p.n != n:
                    raise FormatError(f"teacher {t} distribution for {s.sample_id} has n={p.n}, expected {n}")
                bank[i, t, 0] = p.p_start
                bank[i, t, 1] = p.p_end
    return ArrayData([s.sample_id for s in samples], video, query, qmask, labels, times,
                     durations, bank)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
