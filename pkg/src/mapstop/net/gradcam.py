"""Grad-CAM on the last conv block's activations."""
from __future__ import annotations

import numpy as np

from .layers import ReLU
from .model import PairedModel


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centred bilinear resampling with edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(out_h, h)
    c0, c1, fc = axis(out_w, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def grad_cam(model, image, target_class, upsample=True):
    """Heatmap in [0, 1] for ``target_class`` (0 not-explored, 1 explored).

    Channel weights are the spatial means of d(logit)/d(A^k) where A^k are the
    post-ReLU maps of the last conv block (before its pooling).
    """
    if isinstance(model, PairedModel):
        model = model.cls_model
    target = int(target_class)
    if target not in (0, 1):
        raise ValueError("target_class must be 0 or 1")
    pixels = np.asarray(getattr(image, "pixels", image))
    x = (np.asarray(pixels, dtype=model.dtype)[None] - 0.5)[:, None]
    if x.shape[-1] != model.input_side or x.shape[-2] != model.input_side:
        raise ValueError(f"image side {x.shape[-2:]} does not match model input {model.input_side}")
    layers = model.backbone
    last = max(i for i, l in enumerate(layers) if isinstance(l, ReLU))
    for i, layer in enumerate(layers):
        x = layer.forward(x)
        if i == last:
            acts = x[0].astype(np.float64)
    logits = model.cls_head.forward(model.gap.forward(x))
    dlogits = np.zeros_like(logits)
    dlogits[0, target] = 1.0
    dx = model.gap.backward(model.cls_head.backward(dlogits))
    for layer in reversed(layers[last + 1 :]):
        dx = layer.backward(dx)
    model.zero_grad()  # the head gradients accumulated above are not wanted
    weights = dx[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    cam = cam - cam.min()
    top = cam.max()
    cam = cam / top if top > 0 else np.zeros_like(cam)
    if upsample:
        cam = np.clip(bilinear_resize(cam, model.input_side, model.input_side), 0.0, 1.0)
    return cam
