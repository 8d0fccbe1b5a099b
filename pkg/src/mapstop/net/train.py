"""Joint training of the two heads: cross-entropy + lambda * MSE, Adam, best-by-val-accuracy."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import augment
from .layers import NonFiniteError, loss_reg, softmax_xent_backward
from .model import CnnModel, PairedModel
from .optim import Adam, model_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 24
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rotate: bool = True
    zoom: tuple = (0.9, 1.1)
    lam: float = 1.0  # weight of the area MSE in the joint loss
    theta: float = 0.5  # for validation accuracy
    seed: int = 0
    input_side: int = 128
    widths: tuple = (16, 32, 64, 64)
    separate_heads: bool = False

    def to_dict(self):
        d = asdict(self)
        d["zoom"] = list(self.zoom) if self.zoom is not None else None
        d["widths"] = list(self.widths)
        return d


@dataclass
class TrainResult:
    model: object
    curves: list = field(default_factory=list)  # dicts with epoch, train_loss, val_loss, val_acc
    best_epoch: int = 0
    best_val_acc: float = float("nan")


def evaluate(model, x, y, a, lam=1.0, theta=0.5, batch=32):
    p, a_raw = model.predict(x, batch)
    picked = np.where(y == 1, p, 1 - p)
    ce = -np.log(np.maximum(picked, 1e-12)).mean()
    mse = loss_reg(a_raw, a)
    acc = float(np.mean((p >= theta).astype(int) == y))
    return float(ce + lam * mse), acc


def _batch_step(model, opt, xb, yb, ab, w_cls, w_reg):
    model.zero_grad()
    logits, a_raw = model.forward(xb)
    n = len(yb)
    ce, dlogits = softmax_xent_backward(logits.astype(np.float64), yb)
    diff = a_raw.astype(np.float64) - ab
    mse = float(np.mean(diff**2))
    try:
        model.backward(dlogits * w_cls, 2.0 * diff / n * w_reg)
    except NonFiniteError as exc:
        raise TrainingError(f"training diverged: {exc}", exc.layer) from exc
    opt.step(model_params(model))
    return w_cls * ce + w_reg * mse


def _snapshot(model):
    return {name: layer.params[k].copy() for name, layer, k in model.named_params()}


def _restore(model, snap):
    for name, layer, k in model.named_params():
        layer.params[k] = snap[name]


def train(train_x, train_y, train_a, val_x, val_y, val_a, config=TrainConfig(), curves_path=None):
    """Train on float images (n, side, side) with labels (0/1) and area targets A_t."""
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    train_a = np.asarray(train_a, dtype=np.float64)
    val_a = np.asarray(val_a, dtype=np.float64)
    if len(np.unique(train_y)) < 2:
        raise TrainingError("training set contains a single class; need both explored and not-explored maps")
    if len(train_x) == 0 or len(val_x) == 0:
        raise TrainingError("empty training or validation set")
    c = config
    side = train_x.shape[-1]
    if c.separate_heads:
        models = [CnnModel(side, c.widths, seed=c.seed), CnnModel(side, c.widths, seed=c.seed + 1)]
        weights = [(1.0, 0.0), (0.0, 1.0)]
    else:
        models = [CnnModel(side, c.widths, seed=c.seed)]
        weights = [(1.0, c.lam)]
    opts = [Adam(c.learning_rate, c.beta1, c.beta2, c.eps) for _ in models]
    best = [None] * len(models)
    best_score = [None] * len(models)
    curves = []
    best_epoch, best_acc = 0, -1.0
    n = len(train_x)
    for epoch in range(1, c.epochs + 1):
        rng = np.random.default_rng([c.seed, epoch])
        order = rng.permutation(n)
        total, seen = 0.0, 0
        t0 = time.time()
        for s in range(0, n, c.batch_size):
            idx = order[s : s + c.batch_size]
            xb = np.stack([augment(train_x[i], rng, c.rotate, c.zoom) for i in idx])
            for m, opt, (wc, wr) in zip(models, opts, weights):
                total += _batch_step(m, opt, xb, train_y[idx], train_a[idx], wc, wr) * len(idx)
            seen += len(idx)
        model = models[0] if len(models) == 1 else PairedModel(*models)
        val_loss, val_acc = evaluate(model, val_x, val_y, val_a, c.lam, c.theta)
        curves.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss, "val_acc": val_acc})
        log.info("epoch %d train %.4f val %.4f acc %.3f (%.1fs)", epoch, total / seen, val_loss, val_acc,
                 time.time() - t0)
        # classification net (or the joint one) by val accuracy; a separate regressor by val MSE
        scores = [val_acc]
        if len(models) == 2:
            _, a_raw = models[1].predict(val_x)
            scores.append(-loss_reg(a_raw, val_a))
        for i, (m, sc) in enumerate(zip(models, scores)):
            if best_score[i] is None or sc > best_score[i]:
                best_score[i] = sc
                best[i] = _snapshot(m)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
    for m, snap in zip(models, best):
        _restore(m, snap)
    model = models[0] if len(models) == 1 else PairedModel(*models)
    if curves_path is not None:
        write_curves(curves, curves_path)
    return TrainResult(model, curves, best_epoch, best_acc)


def write_curves(curves, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for row in curves:
            w.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_loss']:.6f}", f"{row['val_acc']:.6f}"])
    return path
