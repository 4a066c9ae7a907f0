"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``EMTM_NUMBA`` is not
set to ``0``.  Both paths compute the same quantities; the oracle tests run
against each of them.  Call :func:`set_backend` to switch at runtime.
"""

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

try:
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


def _env_wants_numba():
    flag = os.environ.get("EMTM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name):
    global _USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# conv1d (same padding, zeros) as im2col / col2im
# ---------------------------------------------------------------------------


def _im2col_np(x, k):
    # x: (B, n, c) -> (B*n, k*c), column block j holds x[t + j - k//2]
    B, n, c = x.shape
    half = k // 2
    xp = np.zeros((B, n + 2 * half, c))
    xp[:, half:half + n] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, n, axis=1)  # B, k, c, n
    return np.ascontiguousarray(win.transpose(0, 3, 1, 2)).reshape(B * n, k * c)


def _col2im_np(cols, B, n, c, k):
    half = k // 2
    g = cols.reshape(B, n, k, c)
    out = np.zeros((B, n + 2 * half, c))
    for j in range(k):
        out[:, j:j + n] += g[:, :, j]
    return out[:, half:half + n]


@njit(cache=True)
def _im2col_nb(x, k):
    B, n, c = x.shape
    half = k // 2
    cols = np.zeros((B * n, k * c))
    for b in range(B):
        for t in range(n):
            row = b * n + t
            for j in range(k):
                src = t + j - half
                if src < 0 or src >= n:
                    continue
                base = j * c
                for ch in range(c):
                    cols[row, base + ch] = x[b, src, ch]
    return cols


@njit(cache=True)
def _col2im_nb(cols, B, n, c, k):
    half = k // 2
    out = np.zeros((B, n, c))
    for b in range(B):
        for t in range(n):
            row = b * n + t
            for j in range(k):
                dst = t + j - half
                if dst < 0 or dst >= n:
                    continue
                base = j * c
                for ch in range(c):
                    out[b, dst, ch] += cols[row, base + ch]
    return out


def conv1d_forward(x, w, bias):
    """Cross-correlation over axis 1 of ``x`` (B, n, c_in) with ``w`` (k, c_in, c_out).

    Returns ``(y, cols)``; ``cols`` is cached for the backward pass.
    """
    B, n, c_in = x.shape
    k, _, c_out = w.shape
    if _USE_NUMBA:
        cols = _im2col_nb(np.ascontiguousarray(x), k)
    else:
        cols = _im2col_np(x, k)
    y = cols @ w.reshape(k * c_in, c_out) + bias
    return y.reshape(B, n, c_out), cols


def conv1d_backward(g, cols, x_shape, w):
    B, n, c_in = x_shape
    k, _, c_out = w.shape
    g2 = g.reshape(B * n, c_out)
    gw = (cols.T @ g2).reshape(k, c_in, c_out)
    gb = g2.sum(axis=0)
    gcols = g2 @ w.reshape(k * c_in, c_out).T
    if _USE_NUMBA:
        gx = _col2im_nb(gcols, B, n, c_in, k)
    else:
        gx = _col2im_np(gcols, B, n, c_in, k)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# layer norm over the last axis
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ln_fwd_nb(x, gamma, beta, eps):
    rows, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for i in range(d):
            mu += x[r, i]
        mu /= d
        var = 0.0
        for i in range(d):
            diff = x[r, i] - mu
            var += diff * diff
        var /= d
        s = 1.0 / np.sqrt(var + eps)
        inv[r] = s
        for i in range(d):
            h = (x[r, i] - mu) * s
            xhat[r, i] = h
            y[r, i] = h * gamma[i] + beta[i]
    return y, xhat, inv


@njit(cache=True)
def _ln_bwd_nb(g, xhat, inv, gamma):
    rows, d = g.shape
    gx = np.empty_like(g)
    ggamma = np.zeros(d)
    gbeta = np.zeros(d)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for i in range(d):
            dh = g[r, i] * gamma[i]
            m1 += dh
            m2 += dh * xhat[r, i]
            ggamma[i] += g[r, i] * xhat[r, i]
            gbeta[i] += g[r, i]
        m1 /= d
        m2 /= d
        for i in range(d):
            dh = g[r, i] * gamma[i]
            gx[r, i] = inv[r] * (dh - m1 - xhat[r, i] * m2)
    return gx, ggamma, gbeta


def layer_norm_forward(x, gamma, beta, eps):
    """Returns ``(y, xhat, inv_std)``; the last two feed the backward pass."""
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    if _USE_NUMBA:
        y, xhat, inv = _ln_fwd_nb(x2, gamma, beta, eps)
    else:
        mu = x2.mean(axis=1, keepdims=True)
        xc = x2 - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        y = xhat * gamma + beta
        inv = inv[:, 0]
    return y.reshape(shape), xhat, inv


def layer_norm_backward(g, xhat, inv, gamma):
    shape = g.shape
    g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
    if _USE_NUMBA:
        gx, ggamma, gbeta = _ln_bwd_nb(g2, xhat, inv, gamma)
    else:
        dh = g2 * gamma
        m1 = dh.mean(axis=1, keepdims=True)
        m2 = (dh * xhat).mean(axis=1, keepdims=True)
        gx = inv[:, None] * (dh - m1 - xhat * m2)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
    return gx.reshape(shape), ggamma, gbeta


# ---------------------------------------------------------------------------
# softmax / log-softmax over the last axis, optional keep-mask
# ---------------------------------------------------------------------------


@njit(cache=True)
def _softmax_nb(x, keep, use_mask):
    rows, n = x.shape
    out = np.zeros_like(x)
    for r in range(rows):
        mx = -np.inf
        for i in range(n):
            if (not use_mask or keep[r, i]) and x[r, i] > mx:
                mx = x[r, i]
        total = 0.0
        for i in range(n):
            if not use_mask or keep[r, i]:
                e = np.exp(x[r, i] - mx)
                out[r, i] = e
                total += e
        for i in range(n):
            out[r, i] /= total
    return out


@njit(cache=True)
def _softmax_bwd_nb(g, p):
    rows, n = g.shape
    gx = np.empty_like(g)
    for r in range(rows):
        dot = 0.0
        for i in range(n):
            dot += g[r, i] * p[r, i]
        for i in range(n):
            gx[r, i] = p[r, i] * (g[r, i] - dot)
    return gx


def _as_rows(x):
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def softmax_last(x, keep=None):
    """Softmax along the last axis. ``keep`` (bool, broadcastable) zeroes masked slots."""
    if _USE_NUMBA:
        if keep is None:
            k2 = np.ones((1, 1), dtype=np.bool_)
            out = _softmax_nb(_as_rows(x), k2, False)
        else:
            k2 = np.ascontiguousarray(np.broadcast_to(keep, x.shape)).reshape(-1, x.shape[-1])
            out = _softmax_nb(_as_rows(x), k2, True)
        return out.reshape(x.shape)
    if keep is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        keep = np.broadcast_to(keep, x.shape)
        z = np.where(keep, x, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last_backward(g, p):
    if _USE_NUMBA:
        return _softmax_bwd_nb(_as_rows(g), _as_rows(p)).reshape(g.shape)
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def log_softmax_last(x, keep=None):
    if keep is None:
        z = x - x.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    keep = np.broadcast_to(keep, x.shape)
    z = np.where(keep, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.where(keep, np.exp(z), 0.0).sum(axis=-1, keepdims=True))
    # masked slots get a large finite negative so downstream products stay finite
    return np.where(keep, z - lse, -1e30)


# ---------------------------------------------------------------------------
# span decoding: argmax_{i <= j} p_s[i] * p_e[j]
# ---------------------------------------------------------------------------


@njit(cache=True)
def _decode_nb(ps, pe):
    B, n = ps.shape
    out = np.zeros((B, 2), dtype=np.int64)
    for b in range(B):
        best = -1.0
        bi = 0
        bj = 0
        for i in range(n):
            for j in range(i, n):
                v = ps[b, i] * pe[b, j]
                if v > best:
                    best = v
                    bi = i
                    bj = j
        out[b, 0] = bi
        out[b, 1] = bj
    return out


def decode_spans(ps, pe):
    """Batched best (start, end) index pair with start <= end.

    Ties go to the smallest start, then the smallest end.
    """
    ps = np.ascontiguousarray(ps, dtype=np.float64)
    pe = np.ascontiguousarray(pe, dtype=np.float64)
    if _USE_NUMBA:
        return _decode_nb(ps, pe)
    B, n = ps.shape
    scores = ps[:, :, None] * pe[:, None, :]
    scores = np.where(np.triu(np.ones((n, n), dtype=bool)), scores, -1.0)
    flat = scores.reshape(B, -1).argmax(axis=1)
    return np.stack([flat // n, flat % n], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# weighted sum of unnormalized Gaussian bumps over clip indices
# ---------------------------------------------------------------------------


@njit(cache=True)
def _gauss_nb(centers, weights, n, sigma):
    out = np.zeros(n)
    denom = 2.0 * sigma * sigma
    for c in range(centers.shape[0]):
        mu = centers[c]
        w = weights[c]
        for i in range(n):
            d = i - mu
            out[i] += w * np.exp(-(d * d) / denom)
    return out


def gaussian_mixture(centers, weights, n, sigma):
    """``sum_c weights[c] * exp(-(i - centers[c])**2 / (2 sigma**2))`` for i in 0..n-1."""
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if _USE_NUMBA:
        return _gauss_nb(centers, weights, n, float(sigma))
    idx = np.arange(n, dtype=np.float64)
    out = np.zeros(n)
    # accumulate candidate by candidate so the summation order matches the loop kernel
    for mu, w in zip(centers, weights):
        out += w * np.exp(-((idx - mu) ** 2) / (2.0 * sigma * sigma))
    return out
