"""Stochastic gradient descent with heavy-ball momentum."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from datforge.errors import ConsistencyError, NonFiniteError
from datforge.numerics.tensor import Tensor

ModelState = dict  # name -> Tensor, insertion ordered


class SGD:
    """v <- momentum * v + g; theta <- theta - lr * scale * v.

    ``lr_scale`` maps parameter-name prefixes to learning-rate multipliers
    (used to slow down an unfrozen encoder).
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 lr_scale: Mapping[str, float] | None = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.lr_scale = dict(lr_scale or {})
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def _scale(self, name: str) -> float:
        for prefix, scale in self.lr_scale.items():
            if name.startswith(prefix):
                return scale
        return 1.0

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                raise ConsistencyError(f"no gradient for parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - (self.lr * self._scale(name)) * v

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in self.velocity:
            if name not in arrays:
                raise ConsistencyError(f"missing momentum buffer for {name!r}")
            self.velocity[name] = np.array(arrays[name], dtype=self.velocity[name].dtype)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
             momentum: float = 0.0, velocity: dict[str, np.ndarray] | None = None) -> dict:
    """Functional single step; ``velocity`` (if given) is updated in place."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        for name, v in velocity.items():
            if name in opt.velocity:
                opt.velocity[name] = v
    opt.step(grads)
    if velocity is not None:
        velocity.update(opt.velocity)
    return opt.params
