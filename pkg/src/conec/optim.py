"""Plain SGD with classical momentum."""

from __future__ import annotations

import numpy as np

from conec.errors import InvalidShapeError


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """One update ``v <- momentum * v + g; p <- p - lr * v``.

    Works on a single array or on dicts of arrays. Returns ``(params, velocity)``
    as new objects; inputs are left untouched.
    """
    if isinstance(params, dict):
        velocity = velocity or {}
        new_p, new_v = {}, {}
        for k, p in params.items():
            new_p[k], new_v[k] = sgd_step(p, grads[k], lr, momentum, velocity.get(k))
        return new_p, new_v
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise InvalidShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
    v = g.copy() if velocity is None else momentum * velocity + g
    return p - lr * v, v


class Sgd:
    """In-place momentum SGD over a fixed set of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            p = self.params[k]
            if p.shape != g.shape:
                raise InvalidShapeError(f"{k}: parameter {p.shape} and gradient {g.shape} differ")
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v
            p -= lr * v
