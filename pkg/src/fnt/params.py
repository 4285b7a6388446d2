"""Named parameter store with name-keyed deterministic initialization.

Every parameter's initial value is drawn from an RNG seeded by
``hash(seed, name)``, so two models built with the same seed share
bit-identical values for every parameter name they have in common,
regardless of construction order. This is what makes the
baseline-equivalence checks exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ValidationError
from .tensor import Parameter, default_dtype


def name_seed(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ParamSet:
    """Registry of named trainable parameters for one model instance."""

    def __init__(self, seed):
        self.seed = seed
        self._params = {}

    def _rng(self, name):
        return np.random.default_rng(name_seed(self.seed, name))

    def _register(self, name, values):
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Parameter(values, name)
        self._params[name] = p
        return p

    def normal(self, name, shape, std):
        vals = self._rng(name).standard_normal(shape) * std
        return self._register(name, vals.astype(default_dtype()))

    def uniform(self, name, shape, bound):
        vals = self._rng(name).uniform(-bound, bound, size=shape)
        return self._register(name, vals.astype(default_dtype()))

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape, dtype=default_dtype()))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape, dtype=default_dtype()))

    def constant(self, name, value):
        return self._register(name, np.asarray(value, dtype=default_dtype()))

    # -- access ---------------------------------------------------------
    def __getitem__(self, name):
        return self._params[name]

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

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    def state_arrays(self):
        """name -> value array, in registration order."""
        return {k: p.data for k, p in self._params.items()}

    def load_arrays(self, arrays, prefix=None, strict=True):
        """Copy values into matching parameters.

        ``prefix`` restricts loading to names under that scope. With
        ``strict`` every selected source name must exist here.
        """
        loaded = []
        for name, vals in arrays.items():
            if prefix is not None and not name.startswith(prefix):
                continue
            if name not in self._params:
                if strict:
                    raise ValidationError(f"checkpoint parameter {name!r} not in model")
                continue
            p = self._params[name]
            if tuple(p.shape) != tuple(np.shape(vals)):
                raise ValidationError(
                    f"shape mismatch for {name!r}: model {tuple(p.shape)} vs checkpoint {tuple(np.shape(vals))}"
                )
            p.data = np.asarray(vals, dtype=p.data.dtype).reshape(p.shape).copy()
            loaded.append(name)
        return loaded

    def checksum(self):
        h = hashlib.sha256()
        for name, p in sorted(self._params.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
        return h.hexdigest()
