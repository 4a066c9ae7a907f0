"""Turn heterogeneous teacher outputs into start/end probability vectors.

Four teacher families are supported: span logits, a 2-D start-by-end score
map, a single regressed (start, end) pair and a scored proposal list.  Each
is mapped onto a pair of length-``n`` distributions over clip indices.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import _kernels as K
from .errors import ConfigError, FormatError, OrderingError

logger = logging.getLogger(__name__)

FORMATS = ("span", "map2d", "regression", "proposals")


@dataclass(frozen=True)
class ClipGrid:
    """Uniform partition of ``[0, duration]`` seconds into ``n`` clips."""

    n: int
    duration: float

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"clip count must be positive, got {self.n}")
        if not self.duration > 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")

    def time_to_index(self, t):
        i = int(math.floor(t / self.duration * self.n))
        return min(max(i, 0), self.n - 1)

    def index_to_time(self, i):
        """Center time of clip ``i``."""
        return (i + 0.5) * self.duration / self.n

    def continuous_index(self, t):
        """Fractional clip position of time ``t`` under the clip-center convention."""
        mu = t / self.duration * self.n - 0.5
        return min(max(mu, 0.0), self.n - 1.0)


@dataclass
class StartEndDistribution:
    p_start: np.ndarray
    p_end: np.ndarray

    @property
    def n(self):
        return len(self.p_start)

    def validate(self, tol=1e-6):
        for name, p in (("p_start", self.p_start), ("p_end", self.p_end)):
            p = np.asarray(p)
            if p.ndim != 1 or not np.all(np.isfinite(p)):
                raise FormatError(f"{name} must be a finite vector")
            if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
                raise FormatError(f"{name} is not a probability vector (sum={p.sum()!r})")
        if len(self.p_start) != len(self.p_end):
            raise FormatError("p_start and p_end lengths differ")
        return self


@dataclass
class SpanLogits:
    start_logits: np.ndarray
    end_logits: np.ndarray


@dataclass
class Map2D:
    scores: np.ndarray


@dataclass
class RegressionPair:
    t_start: float
    t_end: float


@dataclass
class ProposalList:
    # rows of (t_start, t_end, score)
    candidates: np.ndarray


TeacherOutput = Union[SpanLogits, Map2D, RegressionPair, ProposalList]


def format_of(output):
    if isinstance(output, SpanLogits):
        return "span"
    if isinstance(output, Map2D):
        return "map2d"
    if isinstance(output, RegressionPair):
        return "regression"
    if isinstance(output, ProposalList):
        return "proposals"
    raise FormatError(f"not a teacher output: {type(output).__name__}")


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    return K.softmax_last(np.ascontiguousarray(x[None]))[0]


def unify_span(o, n=None):
    s = np.asarray(o.start_logits, dtype=np.float64)
    e = np.asarray(o.end_logits, dtype=np.float64)
    if s.ndim != 1 or e.shape != s.shape:
        raise FormatError(f"span logits must be two equal-length vectors, got {s.shape} and {e.shape}")
    if n is not None and len(s) != n:
        raise FormatError(f"span logits have length {len(s)}, expected {n}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
        raise FormatError("span logits must be finite")
    return StartEndDistribution(softmax(s), softmax(e))


def unify_2dmap(o, n=None):
    S = np.asarray(o.scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise FormatError(f"2-D score map must be square, got shape {S.shape}")
    if n is not None and S.shape[0] != n:
        raise FormatError(f"2-D score map is {S.shape[0]}x{S.shape[0]}, expected {n}x{n}")
    if not np.all(np.isfinite(S)):
        raise FormatError("2-D score map must be finite")
    return StartEndDistribution(softmax(S.max(axis=1)), softmax(S.max(axis=0)))


def _check_sigma(sigma):
    if not sigma > 0:
        raise ConfigError(f"Gaussian width must be positive, got {sigma}")


def _clamp_time(t, grid, what):
    if t < 0 or t > grid.duration:
        warnings.warn(f"{what} time {t} outside [0, {grid.duration}], clamped", stacklevel=3)
        return min(max(t, 0.0), grid.duration)
    return t


def gaussian_vector(times, weights, grid, sigma):
    """Weighted sum of unnormalized Gaussian bumps centred on each time's clip position."""
    centers = np.array([grid.continuous_index(t) for t in times], dtype=np.float64)
    return K.gaussian_mixture(centers, np.asarray(weights, dtype=np.float64), grid.n, sigma)


def unify_proposals(o, grid, sigma):
    _check_sigma(sigma)
    c = np.asarray(o.candidates, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3 or len(c) == 0:
        raise FormatError(f"proposal list must be a non-empty k x 3 array, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise FormatError("proposal list must be finite")
    ts, te, r = c[:, 0], c[:, 1], c[:, 2]
    if np.any(r < 0):
        raise FormatError("proposal scores must be non-negative")
    if not np.any(r > 0):
        raise FormatError("proposal scores are all zero")
    bad = np.nonzero(ts > te)[0]
    if len(bad):
        raise OrderingError(f"proposal {bad[0]} has start {ts[bad[0]]} after end {te[bad[0]]}")
    ts = [_clamp_time(t, grid, "proposal start") for t in ts]
    te = [_clamp_time(t, grid, "proposal end") for t in te]
    return StartEndDistribution(softmax(gaussian_vector(ts, r, grid, sigma)),
                                softmax(gaussian_vector(te, r, grid, sigma)))


def unify_regression(o, grid, sigma):
    if o.t_start > o.t_end:
        raise OrderingError(f"regression pair has start {o.t_start} after end {o.t_end}")
    return unify_proposals(ProposalList(np.array([[o.t_start, o.t_end, 1.0]])), grid, sigma)


def default_sigma(n):
    return n / 20.0


def unify(o, grid, sigma=None):
    """Dispatch on the teacher output type."""
    if sigma is None:
        sigma = default_sigma(grid.n)
    kind = format_of(o)
    if kind == "span":
        return unify_span(o, grid.n)
    if kind == "map2d":
        return unify_2dmap(o, grid.n)
    if kind == "regression":
        return unify_regression(o, grid, sigma)
    return unify_proposals(o, grid, sigma)


def stack(p):
    return np.stack([np.asarray(p.p_start), np.asarray(p.p_end)])


def unstack(a):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != 2:
        raise FormatError(f"stacked distribution must have shape (2, n), got {a.shape}")
    return StartEndDistribution(a[0].copy(), a[1].copy())
