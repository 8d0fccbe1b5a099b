"""Dataset manifests, environment-wise splits and augmentation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..gridmap import PIXEL_VALUE, load_pgm, to_image
from ..labeler import Label

COLUMNS = ("env_id", "run_id", "t_seconds", "pgm_path", "label", "A_t", "largest_cluster_m2")
UNKNOWN_PIXEL = float(PIXEL_VALUE[2])
LEVELS = np.array(sorted(set(float(v) for v in PIXEL_VALUE)))


@dataclass
class Record:
    env_id: str
    run_id: str
    t_seconds: float
    pgm_path: str
    label: Label
    A_t: float
    largest_cluster_m2: float  # NaN when the alpha gate decided

    def row(self):
        d = asdict(self)
        d["label"] = str(self.label)
        d["t_seconds"] = repr(float(self.t_seconds))
        d["A_t"] = repr(float(self.A_t))
        d["largest_cluster_m2"] = repr(float(self.largest_cluster_m2))
        return d


def write_manifest(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    return path


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        out = []
        for i, row in enumerate(reader, start=2):
            try:
                out.append(Record(
                    row["env_id"], row["run_id"], float(row["t_seconds"]), row["pgm_path"],
                    Label.parse(row["label"]), float(row["A_t"]), float(row["largest_cluster_m2"]),
                ))
            except ValueError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from exc
    return out


def load_images(records, root, side=128):
    root = Path(root)
    out = np.empty((len(records), side, side), dtype=np.float32)
    for i, r in enumerate(records):
        out[i] = to_image(load_pgm(root / r.pgm_path), side).pixels
    return out


def split_by_env(env_ids, ratios=(0.7, 0.15, 0.15), seed=0):
    """Assign every environment wholly to train/val/test; returns dict of sorted env lists."""
    envs = sorted(set(env_ids))
    if len(envs) < 3:
        raise ValueError(f"need at least 3 environments to split, got {len(envs)}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError("split ratios must sum to 1")
    order = [envs[i] for i in np.random.default_rng(seed).permutation(len(envs))]
    n = len(envs)
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} environments are too few for ratios {ratios}")
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


def zoom_nearest(img, factor):
    """Scale about the image centre; samples by nearest neighbour so values stay ternary."""
    side = img.shape[0]
    c = side / 2.0
    src = np.floor((np.arange(side) + 0.5 - c) / factor + c).astype(int)
    ok = (src >= 0) & (src < side)
    out = np.full_like(img, UNKNOWN_PIXEL)
    s = np.clip(src, 0, side - 1)
    out[np.ix_(ok, ok)] = img[np.ix_(s[ok], s[ok])]
    return out


def snap(img):
    """Nearest of the pixel levels {0, 0.5, 1}."""
    idx = np.abs(img[..., None] - LEVELS).argmin(axis=-1)
    return LEVELS[idx].astype(img.dtype)


def max_zoom(img):
    """Largest scale factor that keeps every known pixel inside the frame."""
    known = img != UNKNOWN_PIXEL
    if not known.any():
        return np.inf
    side = img.shape[0]
    c = side / 2.0
    idx = np.flatnonzero(known.any(axis=0) | known.any(axis=1))
    lo, hi = idx.min(), idx.max() + 1
    limits = [c / (c - lo) if lo < c else np.inf, (side - c) / (hi - c) if hi > c else np.inf]
    return min(limits)


def augment(img, rng, rotate=True, zoom=(0.9, 1.1)):
    if rotate:
        img = np.rot90(img, int(rng.integers(4)))
    if zoom is not None:
        # zooming in must not push known cells (e.g. outer walls) out of the frame:
        # a cropped complete map would look unfinished and break label invariance
        f = min(float(rng.uniform(zoom[0], zoom[1])), max_zoom(img))
        img = zoom_nearest(np.ascontiguousarray(img), f)
    return np.ascontiguousarray(img)
