"""SGD and Adam with decoupled weight decay.

Weight decay is applied as p <- p - lr * wd * p on top of the gradient
update, for both optimizers. The optimizer is the single writer of
parameter data.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class Sgd:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: list[Tensor], grads: dict[Tensor, Tensor]):
        for p in params:
            g = grads[p].data
            p.data = p.data - self.lr * g - self.lr * self.weight_decay * p.data


class Adam:
    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t = 0

    def step(self, params: list[Tensor], grads: dict[Tensor, Tensor]):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            g = grads[p].data
            m = self._m.get(id(p))
            if m is None:
                m = np.zeros_like(p.data)
                self._m[id(p)] = m
                self._v[id(p)] = np.zeros_like(p.data)
            v = self._v[id(p)]
            m[:] = b1 * m + (1.0 - b1) * g
            v[:] = b2 * v + (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self._t)
            v_hat = v / (1.0 - b2 ** self._t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                      - self.lr * self.weight_decay * p.data)


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return Sgd(lr, weight_decay)
    if kind == "adam":
        return Adam(lr, weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}")
