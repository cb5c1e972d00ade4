"""
ParamSet: the named collection of every learnable value of a model.

Names are dotted paths (``embed.tokens``, ``layer.4.mlp.w_up``,
``layer.3.ln_x.scale``, ``final.ln.scale``). Iteration order is insertion
order, which makes flat vectors and checkpoints stable.
"""
import copy
import fnmatch
from collections import OrderedDict

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Parameter


class ParamSet:
    """
    Ordered mapping from parameter name to Parameter.

    ``config`` is the ModelConfig the set was initialized for; it travels
    with the set into checkpoints so a checkpoint is self-describing.
    """

    def __init__(self, params=(), config=None):
        self._params = OrderedDict()
        self.config = config
        for param in params:
            self._insert(param)

    def _insert(self, param):
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def add(self, name, value):
        return self._insert(Parameter(name, value))

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def get(self, name, default=None):
        return self._params.get(name, default)

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def matching(self, pattern):
        """Parameters whose name matches a shell-style pattern."""
        return [p for name, p in self._params.items() if fnmatch.fnmatchcase(name, pattern)]

    def with_prefix(self, prefix):
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def num_values(self):
        return int(sum(p.data.size for p in self))

    def zero_grad(self):
        for param in self:
            param.zero_grad()

    def flat_values(self):
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.data.reshape(-1) for p in self])

    def flat_grads(self):
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.grad.reshape(-1) for p in self])

    def set_flat_values(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_values(),):
            raise DimensionError(
                f"flat vector of shape {vector.shape} does not match {self.num_values()} parameter values"
            )
        offset = 0
        for param in self:
            size = param.data.size
            param.data = vector[offset:offset + size].reshape(param.shape).copy()
            offset += size

    def copy(self):
        """Deep copy of values and gradients; the config is shared."""
        clone = ParamSet(config=self.config)
        for param in self:
            new = clone.add(param.name, param.data.copy())
            new.grad = param.grad.copy()
        return clone

    def renamed(self, rename, config=None):
        """
        Copy with names mapped through ``rename``; names mapped to None are dropped.
        """
        clone = ParamSet(config=config if config is not None else self.config)
        for param in self:
            new_name = rename(param.name)
            if new_name is not None:
                clone.add(new_name, param.data.copy())
        return clone

    def __deepcopy__(self, memo):
        clone = self.copy()
        clone.config = copy.deepcopy(self.config, memo)
        return clone

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.num_values()} values)"
