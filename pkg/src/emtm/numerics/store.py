import numpy as np

from ..errors import ContractError
from .engine import Node


class ParameterStore:
    """Named trainable parameters in insertion order.

    Lookups can be recorded (``track_access``) so callers can prove which
    parameters a computation touched.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params = {}
        self._accessed = None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def __getitem__(self, name):
        if self._accessed is not None:
            self._accessed.add(name)
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        node.zero_grad()
        self._params[name] = node
        return node

    def get_or_create(self, name, shape, init="glorot"):
        if name in self._params:
            return self._params[name]
        return self.add(name, self._init(shape, init))

    def _init(self, shape, init):
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if init == "normal":
            return self.rng.normal(0.0, 0.1, size=shape)
        if init == "glorot":
            if len(shape) == 1:
                return np.zeros(shape)
            receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return self.rng.uniform(-limit, limit, size=shape)
        raise ValueError(f"unknown init {init!r}")

    def zero_grad(self):
        for node in self._params.values():
            node.zero_grad()

    def size(self, prefix=None):
        return int(sum(node.value.size for name, node in self._params.items()
                       if prefix is None or name.startswith(prefix)))

    def state_dict(self):
        return {name: node.value.copy() for name, node in self._params.items()}

    def load_state_dict(self, state, strict=True):
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            node = self._params[name]
            if node.value.shape != np.shape(value):
                raise ContractError(f"{name}: shape {np.shape(value)} != {node.value.shape}")
            node.value[...] = value

    def track_access(self):
        self._accessed = set()
        return self._accessed

    def stop_tracking(self):
        accessed, self._accessed = self._accessed, None
        return accessed
