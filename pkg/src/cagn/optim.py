"""Bias-corrected Adam over a named parameter slice.

Moment state is keyed by parameter name and lazily zero-initialized.
Parameters absent from the gradient map are left untouched, byte for byte.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"Adam: lr must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]):
        """One update; `grads` maps parameter name -> gradient tensor."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            gd = g.data
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1 - b1) * gd
            v *= b2
            v += (1 - b2) * gd * gd
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: Adam):
    """Functional wrapper matching the engine surface; mutates via `state`."""
    state.step(params, grads)
    return params
