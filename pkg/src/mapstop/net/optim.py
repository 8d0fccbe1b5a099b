"""Adam with bias correction."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        """``params``: iterable of (key, param array, grad array); params are updated in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for key, p, g in params:
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def model_params(model):
    for name, layer, k in model.named_params():
        yield name, layer.params[k], layer.grads[k]
