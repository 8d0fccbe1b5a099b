"""Two-head CNN: shared conv backbone, explored/not-explored classifier and area regressor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..labeler import Label
from .layers import (
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2,
    NonFiniteError,
    ReLU,
    softmax,
)

EXPLORED = int(Label.EXPLORED)  # class index of the "explored" softmax output


@dataclass(frozen=True)
class ClassifierConfig:
    theta: float = 0.5

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")


class CnnModel:
    """Blocks of conv(k) -> ReLU -> maxpool2, then global average pool and two dense heads.

    Pixels are shifted by -0.5 on input so that unknown space (0.5) is zero,
    the same value the convolutions pad with.
    """

    def __init__(self, input_side=128, widths=(16, 32, 64, 64), kernel=3, seed=0,
                 dtype=np.float32, pool=True):
        if not widths:
            raise ValueError("need at least one conv block")
        self.input_side = int(input_side)
        self.widths = tuple(int(w) for w in widths)
        self.kernel = int(kernel)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.pool = bool(pool)
        self.debug = False
        rng = np.random.default_rng(seed)
        self.backbone = []
        cin = 1
        for i, cout in enumerate(self.widths):
            self.backbone.append(Conv2D(cin, cout, self.kernel, rng, self.dtype, name=f"conv{i}"))
            self.backbone.append(ReLU(name=f"relu{i}"))
            if self.pool:
                self.backbone.append(MaxPool2(name=f"pool{i}"))
            cin = cout
        self.backbone[0].need_dx = False
        self.gap = GlobalAvgPool(name="gap")
        self.cls_head = Dense(cin, 2, rng, self.dtype, name="cls")
        self.reg_head = Dense(cin, 1, rng, self.dtype, name="reg")
        self.reg_head.params["b"][:] = 0.5  # start inside the target range, not at the dead ReLU knee
        self.reg_relu = ReLU(name="reg_relu")

    # -- bookkeeping --------------------------------------------------------
    @property
    def layers(self):
        return self.backbone + [self.gap, self.cls_head, self.reg_head, self.reg_relu]

    def named_params(self):
        for layer in self.layers:
            for k in layer.params:
                yield f"{layer.name}.{k}", layer, k

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def config(self):
        return {
            "input_side": self.input_side,
            "widths": list(self.widths),
            "kernel": self.kernel,
            "seed": self.seed,
            "pool": self.pool,
        }

    def astype(self, dtype):
        for _, layer, k in self.named_params():
            layer.params[k] = layer.params[k].astype(dtype)
        self.dtype = np.dtype(dtype)
        self.zero_grad()
        return self

    # -- passes -------------------------------------------------------------
    def _check(self, layer, x, what="output"):
        if self.debug and not np.isfinite(x).all():
            raise NonFiniteError(layer.name, what)

    def features(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[-2:] != (self.input_side, self.input_side):
            raise ValueError(f"image side {x.shape[-2:]} does not match model input {self.input_side}")
        x = (x - 0.5)[:, None, :, :]
        for layer in self.backbone:
            x = layer.forward(x)
            self._check(layer, x)
        return x

    def forward(self, images):
        """Return (logits (n,2), raw area (n,)) and keep caches for backward."""
        feat = self.gap.forward(self.features(images))
        logits = self.cls_head.forward(feat)
        a_raw = self.reg_relu.forward(self.reg_head.forward(feat))[:, 0]
        self._check(self.cls_head, logits)
        return logits, a_raw

    def backward(self, dlogits, da_raw):
        """Accumulate parameter gradients from d(loss)/d(logits) and d(loss)/d(raw area)."""
        da = np.asarray(da_raw, dtype=self.dtype).reshape(-1, 1)
        dfeat = self.cls_head.backward(np.asarray(dlogits, dtype=self.dtype))
        dfeat = dfeat + self.reg_head.backward(self.reg_relu.backward(da))
        dx = self.gap.backward(dfeat)
        for layer in reversed(self.backbone):
            dx = layer.backward(dx)  # None after the first conv
        for name, layer, k in self.named_params():
            if not np.isfinite(layer.grads[k]).all():
                raise NonFiniteError(layer.name, f"gradient {k}")
        return dx

    def predict(self, images, batch=32):
        """(p_explored (n,), raw area (n,)) without keeping anything for training."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        ps, As = [], []
        for i in range(0, len(images), batch):
            logits, a_raw = self.forward(images[i : i + batch])
            ps.append(softmax(logits.astype(np.float64))[:, EXPLORED])
            As.append(a_raw.astype(np.float64))
        return np.concatenate(ps), np.concatenate(As)


class PairedModel:
    """Separate classification and regression networks with the same architecture."""

    def __init__(self, cls_model: CnnModel, reg_model: CnnModel):
        if cls_model.input_side != reg_model.input_side:
            raise ValueError("paired models must share the input side")
        self.cls_model = cls_model
        self.reg_model = reg_model

    @property
    def input_side(self):
        return self.cls_model.input_side

    def predict(self, images, batch=32):
        p, _ = self.cls_model.predict(images, batch)
        _, a = self.reg_model.predict(images, batch)
        return p, a


def forward(model, image):
    """Single image -> (softmax 2-vector, raw area)."""
    pixels = getattr(image, "pixels", image)
    logits, a_raw = model.forward(np.asarray(pixels)[None])
    return softmax(logits.astype(np.float64))[0], float(a_raw[0])


def classify(model, image, config: ClassifierConfig = ClassifierConfig()):
    pixels = getattr(image, "pixels", image)
    p, _ = model.predict(np.asarray(pixels)[None])
    return float(p[0]), decide(float(p[0]), config.theta)


def decide(p_explored, theta):
    """Explored iff p_explored >= theta (inclusive)."""
    return Label.EXPLORED if p_explored >= theta else Label.NOT_EXPLORED


def clamp_area(a_raw):
    return np.minimum(a_raw, 1.0)


def estimate_area(model, image):
    pixels = getattr(image, "pixels", image)
    _, a = model.predict(np.asarray(pixels)[None])
    return float(clamp_area(a[0]))
