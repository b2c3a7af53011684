"""Adam optimizer over a ParamSet, with serializable state."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .errors import NumericError, UsageError
from .tensor import ParamSet


class Adam:
    """Adam with bias correction. Operates on the trainable members of a ParamSet."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 < lr:
            raise UsageError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._params = list(params.trainable())
        if not self._params:
            raise UsageError("optimizer got an empty trainable set")
        self._m = {name: np.zeros_like(t.data) for name, t in self._params}
        self._v = {name: np.zeros_like(t.data) for name, t in self._params}

    def zero_grad(self) -> None:
        for _, t in self._params:
            t.grad = None

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self._params:
            g = p.grad
            if g is None:
                continue  # parameter did not participate in this step's graph
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    # -- serialization ---------------------------------------------------

    def export_state(self) -> Tuple[int, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
        return self.t, {name: (self._m[name], self._v[name]) for name, _ in self._params}

    def import_state(self, t: int, slots: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
        self.t = int(t)
        for name, _ in self._params:
            if name not in slots:
                raise UsageError(f"optimizer state is missing slot {name!r}")
            m, v = slots[name]
            if m.shape != self._m[name].shape or v.shape != self._v[name].shape:
                raise UsageError(f"optimizer state shape mismatch for {name!r}")
            self._m[name][...] = m
            self._v[name][...] = v
