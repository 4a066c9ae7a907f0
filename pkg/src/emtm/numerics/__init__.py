"""Dense float64 arithmetic with a reverse-mode gradient tape."""

from . import layers, ops
from .engine import Node, as_node, backward, grad_enabled, no_grad
from .gradcheck import check_gradients, numeric_grad, relative_error
from .store import ParameterStore

__all__ = [
    "Node",
    "ParameterStore",
    "as_node",
    "backward",
    "check_gradients",
    "grad_enabled",
    "layers",
    "no_grad",
    "numeric_grad",
    "ops",
    "relative_error",
]
