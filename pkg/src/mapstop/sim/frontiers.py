"""Frontier detection (free cells bordering unknown space)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..gridmap import OccupancyGrid
from ..kernels import FREE, UNKNOWN

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class FrontierCluster:
    cells: np.ndarray  # (k, 2) row, col in row-major order
    centroid: tuple

    def __len__(self):
        return self.cells.shape[0]

    def nearest_to_centroid(self):
        d = ((self.cells - np.asarray(self.centroid)) ** 2).sum(axis=1)
        return np.argsort(d, kind="stable")


def frontier_mask(grid: OccupancyGrid):
    unknown = grid.cells == UNKNOWN
    near_unknown = ndimage.binary_dilation(unknown, structure=EIGHT)
    return near_unknown & (grid.cells == FREE)


def detect_frontiers(grid: OccupancyGrid, min_frontier_cells: int = 3):
    """Frontier clusters by 8-connectivity, largest first.

    Ties in size go to the cluster holding the smaller row-major cell index.
    """
    mask = frontier_mask(grid)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")  # idx already row-major within each label
    idx, lab = idx[order], lab[order]
    bounds = np.flatnonzero(np.diff(lab)) + 1
    clusters = []
    w = grid.width
    for chunk in np.split(idx, bounds):
        if chunk.size < min_frontier_cells:
            continue
        cells = np.stack([chunk // w, chunk % w], axis=1)
        centroid = tuple(cells.mean(axis=0).tolist())
        clusters.append((-(chunk.size), int(chunk[0]), FrontierCluster(cells, centroid)))
    clusters.sort(key=lambda t: (t[0], t[1]))
    return [c for _, _, c in clusters]
