"""Confusion / time / area metrics and the batch and online evaluation protocols."""
from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gridmap import DegenerateInputError, area_ratio, to_image
from .labeler import Label, LabelParams, ideal_stop_time, label_map
from .stopping import Learned, first_stop_time


@dataclass
class ConfusionCounts:
    TE: int = 0
    FE: int = 0
    TN: int = 0
    FN: int = 0

    def __post_init__(self):
        for k in ("TE", "FE", "TN", "FN"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self):
        return self.TE + self.FE + self.TN + self.FN

    def __add__(self, other):
        return ConfusionCounts(self.TE + other.TE, self.FE + other.FE, self.TN + other.TN, self.FN + other.FN)

    @classmethod
    def from_labels(cls, truth, pred):
        truth = np.asarray(truth, dtype=int)
        pred = np.asarray(pred, dtype=int)
        e = int(Label.EXPLORED)
        return cls(
            int(np.sum((pred == e) & (truth == e))),
            int(np.sum((pred == e) & (truth != e))),
            int(np.sum((pred != e) & (truth != e))),
            int(np.sum((pred != e) & (truth == e))),
        )


def _ratio(a, b):
    return a / b if b else None


def confusion_metrics(c: ConfusionCounts):
    """(accuracy, precision, recall); a metric with a zero denominator is None."""
    if c.total <= 0:
        raise DegenerateInputError("confusion counts are all zero")
    return (c.TE + c.TN) / c.total, _ratio(c.TE, c.TE + c.FE), _ratio(c.TE, c.TE + c.FN)


def time_metrics(T, t_hat, t_bar):
    """(delta_t_hat, err_t).  A criterion that never fired saves nothing and is charged at T."""
    if not T > 0:
        raise DegenerateInputError(f"exploration time T must be > 0, got {T}")
    tol = 1e-9 * T
    t_hat_eff = T if t_hat is None else t_hat
    t_bar_eff = T if t_bar is None else t_bar
    if t_hat_eff > T + tol or t_bar_eff > T + tol:
        raise ValueError(f"stop times ({t_hat}, {t_bar}) exceed T={T}")
    return abs(T - t_hat_eff) / T, abs(t_bar_eff - t_hat_eff) / T


@dataclass
class RunMetrics:
    env_id: str
    run_id: str
    T: float
    t_hat: float | None
    t_bar: float | None
    delta_t_hat: float
    err_t: float
    A_at_stop: float
    err_A_mean: float


@dataclass
class EvalReport:
    mode: str
    theta: float
    rows: list = field(default_factory=list)  # ordered dicts, one per env then "all"
    runs: list = field(default_factory=list)  # RunMetrics
    summary: dict = field(default_factory=dict)

    def write_csv(self, path):
        return write_rows(self.rows, path)

    def write_runs_csv(self, path):
        return write_rows([asdict(r) for r in self.runs], path)

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {"mode": self.mode, "theta": self.theta, "summary": self.summary, "rows": self.rows}
        path.write_text(json.dumps(_clean(body), indent=1, sort_keys=True) + "\n")
        return path

    @property
    def overall(self):
        return self.rows[-1] if self.rows else {}


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, 10)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{float(v):.6f}"
    return str(v)


def write_rows(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    return path


def _confusion_row(counts):
    acc, prec, rec = confusion_metrics(counts) if counts.total else (None, None, None)
    return OrderedDict(TE=counts.TE, FE=counts.FE, TN=counts.TN, FN=counts.FN,
                       accuracy=acc, precision=prec, recall=rec)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def area_errors(a_true, a_raw):
    return np.abs(np.asarray(a_true, dtype=np.float64) - np.minimum(np.asarray(a_raw, dtype=np.float64), 1.0))


def batch_eval(records, p_explored, a_raw, theta=0.5):
    """Evaluate independently classified snapshots.

    ``records`` are dataset rows (env_id, run_id, t_seconds, label, A_t, ...);
    ``p_explored``/``a_raw`` are the model outputs for those rows.  T for a
    run is its terminal snapshot time.
    """
    if not len(records):
        raise DegenerateInputError("empty manifest")
    p = np.asarray(p_explored, dtype=np.float64)
    a_raw = np.asarray(a_raw, dtype=np.float64)
    truth = np.array([int(r.label) for r in records])
    pred = (p >= theta).astype(int)
    err_a = area_errors([r.A_t for r in records], a_raw)

    by_run = OrderedDict()
    for i, r in enumerate(records):
        by_run.setdefault((r.env_id, r.run_id), []).append(i)
    runs = []
    harm = []
    for (env, run), idx in by_run.items():
        idx = sorted(idx, key=lambda i: records[i].t_seconds)
        T = records[idx[-1]].t_seconds
        t_hat = next((records[i].t_seconds for i in idx if pred[i] == 1), None)
        first_true = next((i for i in idx if truth[i] == 1), None)
        t_bar = records[first_true].t_seconds if first_true is not None else None
        stop_i = next((i for i in idx if pred[i] == 1), idx[-1])
        if T > 0:
            dt, et = time_metrics(T, t_hat, t_bar)
        else:
            dt, et = 0.0, 0.0
        runs.append(RunMetrics(env, run, T, t_hat, t_bar, dt, et, records[stop_i].A_t,
                               float(err_a[idx].mean())))
        if first_true is not None:
            ref = records[first_true].A_t
            harm += [ref - records[i].A_t for i in idx if pred[i] == 1 and truth[i] == 0]

    rows = []
    envs = list(OrderedDict.fromkeys(r.env_id for r in records))
    total = ConfusionCounts()
    for env in envs + ["all"]:
        sel = np.array([env == "all" or r.env_id == env for r in records])
        counts = ConfusionCounts.from_labels(truth[sel], pred[sel])
        if env != "all":
            total = total + counts
        else:
            counts = total
        env_runs = [m for m in runs if env == "all" or m.env_id == env]
        row = OrderedDict(env_id=env, n_maps=int(sel.sum()), n_runs=len(env_runs))
        row.update(_confusion_row(counts))
        row["fe_rate"] = counts.FE / counts.total if counts.total else None
        row["err_A"] = float(err_a[sel].mean())
        row["delta_t_hat"] = _mean([m.delta_t_hat for m in env_runs])
        row["err_t"] = _mean([m.err_t for m in env_runs])
        rows.append(row)
    summary = dict(rows[-1])
    summary["fe_area_shortfall"] = _mean(harm)
    summary["delta_t_bar"] = _mean([time_metrics(m.T, m.t_bar, m.t_bar)[0] for m in runs if m.T > 0])
    return EvalReport("batch", float(theta), rows, runs, summary)


def online_eval(runs, model, theta=0.5, k=1, label_params=LabelParams(), side=None):
    """Replay the learned criterion on dense runs.

    ``runs``: iterable of (run, full_map).  Confusion counts over the dense
    snapshots are reported but are informational only: consecutive maps are
    nearly identical, so they overweight long runs.
    """
    side = side or model.input_side
    metrics = []
    counts_by_env = OrderedDict()
    for run, full in runs:
        snaps = [s for s in run.snapshots if s.t <= run.total_time]
        imgs = np.stack([to_image(s.map, side).pixels for s in snaps])
        p, a_raw = model.predict(imgs)
        labels = [label_map(s.map, full, label_params) for s in snaps]
        truth = [int(l.label) for l in labels]
        crit = Learned(model, theta, k, side)
        t_hat = first_stop_time(run, crit)
        t_bar = ideal_stop_time(run, full, label_params)
        T = run.total_time
        dt, et = time_metrics(T, t_hat, t_bar) if T > 0 else (0.0, 0.0)
        stop_snap = next((s for s in snaps if s.t == t_hat), snaps[-1])
        a_stop = area_ratio(stop_snap.map, full)
        err = area_errors([l.area_ratio for l in labels], a_raw)
        metrics.append(RunMetrics(run.env_id, str(run.seed), T, t_hat, t_bar, dt, et, a_stop, float(err.mean())))
        c = ConfusionCounts.from_labels(truth, (p >= theta).astype(int))
        counts_by_env[run.env_id] = counts_by_env.get(run.env_id, ConfusionCounts()) + c

    rows = []
    total = ConfusionCounts()
    for env in list(counts_by_env) + ["all"]:
        env_runs = [m for m in metrics if env == "all" or m.env_id == env]
        counts = counts_by_env[env] if env != "all" else total
        if env != "all":
            total = total + counts
        row = OrderedDict(env_id=env, n_runs=len(env_runs))
        row["fired"] = sum(m.t_hat is not None for m in env_runs)
        row["delta_t_hat"] = _mean([m.delta_t_hat for m in env_runs])
        row["delta_t_bar"] = _mean([time_metrics(m.T, m.t_bar, m.t_bar)[0] for m in env_runs if m.T > 0])
        row["err_t"] = _mean([m.err_t for m in env_runs])
        row["A_at_stop"] = _mean([m.A_at_stop for m in env_runs])
        row["frac_A_ge_0.95"] = _mean([float(m.A_at_stop >= 0.95) for m in env_runs])
        row["err_A"] = _mean([m.err_A_mean for m in env_runs])
        conf = _confusion_row(counts)
        row.update({f"info_{k}": v for k, v in conf.items()})
        rows.append(row)
    summary = dict(rows[-1]) if rows else {}
    summary["confusion_informational_only"] = True
    return EvalReport("online", float(theta), rows, metrics, summary)


def area_error_curve(a_true, a_raw, width=0.1):
    """Rows (bin_lo, bin_hi, mean_err, std_err, n) over A_t; empty bins are omitted."""
    a_true = np.asarray(a_true, dtype=np.float64)
    err = area_errors(a_true, a_raw)
    nb = int(round(1.0 / width))
    idx = np.minimum((a_true / width + 1e-9).astype(int), nb - 1)
    rows = []
    for b in range(nb):
        sel = idx == b
        if not sel.any():
            continue
        rows.append(OrderedDict(bin_lo=round(b * width, 10), bin_hi=round((b + 1) * width, 10),
                                mean_err=float(err[sel].mean()), std_err=float(err[sel].std()),
                                n=int(sel.sum())))
    return rows
