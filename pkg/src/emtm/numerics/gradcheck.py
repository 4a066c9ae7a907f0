import numpy as np

from .engine import backward


def numeric_grad(fn, node, eps=1e-5):
    """Central finite differences of scalar ``fn()`` with respect to ``node.value``."""
    value = node.value
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().value)
        flat[i] = orig - eps
        down = float(fn().value)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-10):
    """``||a - n|| / max(||a||, ||n||)``; zero when both norms are below ``floor``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn, nodes, eps=1e-5):
    """Relative error per node between reverse-mode and finite-difference gradients.

    ``fn`` must rebuild the graph on every call and return a scalar Node.
    """
    for n in nodes:
        n.zero_grad()
    backward(fn())
    errors = {}
    for i, n in enumerate(nodes):
        analytic = n.grad.copy()
        errors[n.name or i] = relative_error(analytic, numeric_grad(fn, n, eps))
    return errors
