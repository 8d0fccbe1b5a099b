"""Rule-based explored / not-explored labels from the complete map."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import kernels
from .gridmap import OccupancyGrid, area_ratio, check_same_frame


class Label(IntEnum):
    NOT_EXPLORED = 0
    EXPLORED = 1

    def __str__(self):
        return "explored" if self is Label.EXPLORED else "not-explored"

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text in ("explored", "1", "e"):
            return cls.EXPLORED
        if text in ("not-explored", "not_explored", "0", "n"):
            return cls.NOT_EXPLORED
        raise ValueError(f"unknown label {text!r}")


@dataclass(frozen=True)
class LabelParams:
    alpha: float = 0.7
    beta: float = 1.0  # m^2
    dbscan_eps: float | None = None  # meters; None -> 1.5 * resolution
    dbscan_min_pts: int = 4

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.dbscan_eps is not None and not self.dbscan_eps > 0:
            raise ValueError("dbscan eps must be > 0")
        if self.dbscan_min_pts < 1:
            raise ValueError("dbscan min_pts must be >= 1")

    def eps_for(self, resolution):
        return self.dbscan_eps if self.dbscan_eps is not None else 1.5 * resolution


@dataclass
class ClusterResult:
    labels: np.ndarray  # per input point; -1 marks noise

    @property
    def clusters(self):
        n = int(self.labels.max()) + 1 if self.labels.size else 0
        return [np.flatnonzero(self.labels == k) for k in range(n)]

    @property
    def noise(self):
        return np.flatnonzero(self.labels < 0)

    def sizes(self):
        if not self.labels.size or self.labels.max() < 0:
            return np.zeros(0, dtype=np.int64)
        return np.bincount(self.labels[self.labels >= 0])


def dbscan(points, eps, min_pts) -> ClusterResult:
    """Density clustering in input order; border points join the first cluster reaching them.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps`` (inclusive).
    """
    if not eps > 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    return ClusterResult(kernels.dbscan_labels(pts, float(eps), int(min_pts)))


def unexplored_cells(partial: OccupancyGrid, full: OccupancyGrid):
    """(row, col) pairs unknown in ``partial`` but known in ``full``, row-major."""
    check_same_frame(partial, full)
    mask = ~partial.known() & full.known()
    return np.argwhere(mask)


def cell_centers(cells, resolution):
    cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    return np.stack([(cells[:, 1] + 0.5) * resolution, (cells[:, 0] + 0.5) * resolution], axis=1)


@dataclass
class LabelResult:
    label: Label
    area_ratio: float
    largest_cluster_m2: float

    def __iter__(self):
        return iter((self.label, self.area_ratio, self.largest_cluster_m2))


def label_map(partial: OccupancyGrid, full: OccupancyGrid, params: LabelParams = LabelParams()):
    """Label a partial map; returns (label, A_t, largest unexplored cluster area in m^2)."""
    a_t = area_ratio(partial, full)
    if a_t < params.alpha:
        return LabelResult(Label.NOT_EXPLORED, a_t, float("nan"))
    cells = unexplored_cells(partial, full)
    largest = 0.0
    if len(cells):
        res = full.resolution
        result = dbscan(cell_centers(cells, res), params.eps_for(res), params.dbscan_min_pts)
        sizes = result.sizes()
        if sizes.size:
            largest = float(sizes.max()) * res * res
    # cell count * res^2 carries rounding (25 * 0.2**2 > 1.0); a cluster of exactly beta is not "greater"
    label = Label.NOT_EXPLORED if largest > params.beta * (1 + 1e-9) else Label.EXPLORED
    return LabelResult(label, a_t, largest)


def ideal_stop_time(run, full: OccupancyGrid, params: LabelParams = LabelParams()):
    """Time of the earliest snapshot the labeler calls explored, or None."""
    if not run.snapshots:
        raise ValueError("run has no snapshots")
    for snap in run.snapshots:
        if label_map(snap.map, full, params).label is Label.EXPLORED:
            return snap.t
    return None
