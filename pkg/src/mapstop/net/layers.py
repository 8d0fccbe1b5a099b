"""Layers with explicit forward/backward passes on NCHW numpy arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels


class NonFiniteError(FloatingPointError):
    """A tensor or gradient contained NaN/Inf; ``layer`` names the culprit."""

    def __init__(self, layer, what):
        super().__init__(f"non-finite {what} in layer {layer!r}")
        self.layer = layer


class Layer:
    """Base class: ``params``/``grads`` map names to arrays of the same shape."""

    kind = "layer"

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def spec(self):
        return {"kind": self.kind, "name": self.name}


class Conv2D(Layer):
    """Stride-1 'same' convolution via im2col; zero padding."""

    kind = "conv"

    def __init__(self, cin, cout, k=3, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.k = cin, cout, k
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.params["W"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.need_dx = True  # the first layer of a network can skip its input gradient
        self.zero_grad()

    def spec(self):
        return {**super().spec(), "cin": self.cin, "cout": self.cout, "k": self.k}

    def _im2col(self, x):
        n, c, h, w = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))  # n c h w k k
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.k * self.k)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.cin:
            raise ValueError(f"{self.name}: expected {self.cin} channels, got {c}")
        cols = self._im2col(x)
        wmat = self.params["W"].reshape(self.cout, -1)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(n, h, w, self.cout).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (n, c, h, w), cols = self._cache
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        self.grads["W"] += (dflat.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] += dflat.sum(axis=0)
        self._cache = None
        if not self.need_dx:
            return None
        # the input gradient is a 'same' correlation of dout with the flipped, transposed kernel
        wflip = self.params["W"][:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(-1, c)
        dx = self._im2col(dout) @ wflip
        return dx.reshape(n, h, w, c).transpose(0, 3, 1, 2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._mask


class MaxPool2(Layer):
    """2x2 / stride 2; odd trailing rows/cols are dropped.  Ties route to the first max."""

    kind = "maxpool"

    def forward(self, x):
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x))
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        shape, arg = self._cache
        return kernels.maxpool_backward(np.ascontiguousarray(dout), arg, shape[2], shape[3])


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to((dout / (h * w))[:, :, None, None], self._shape).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin, nout, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        self.nin, self.nout = nin, nout
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(1.0 / nin)
        self.params["W"] = (rng.standard_normal((nin, nout)) * std).astype(dtype)
        self.params["b"] = np.zeros(nout, dtype=dtype)
        self.zero_grad()

    def spec(self):
        return {**super().spec(), "nin": self.nin, "nout": self.nout}

    def forward(self, x):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] += self._x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"].T


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


EPS_LOG = 1e-12


def loss_cls(p, label):
    """Cross-entropy -log p[label] for one distribution or a batch (mean)."""
    p = np.asarray(p, dtype=np.float64)
    label = np.asarray(label, dtype=np.int64)
    if p.ndim == 1:
        return float(-np.log(max(p[label], EPS_LOG)))
    picked = p[np.arange(len(label)), label]
    return float(-np.log(np.maximum(picked, EPS_LOG)).mean())


def loss_reg(a_hat, a_true):
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a_true = np.asarray(a_true, dtype=np.float64)
    return float(np.mean((a_hat - a_true) ** 2))


def softmax_xent_backward(logits, label):
    """Loss and d(mean CE)/d(logits) for the fused softmax + cross-entropy."""
    n = logits.shape[0]
    p = softmax(logits)
    loss = loss_cls(p, label)
    d = p.copy()
    d[np.arange(n), label] -= 1
    return loss, (d / n).astype(logits.dtype, copy=False)
