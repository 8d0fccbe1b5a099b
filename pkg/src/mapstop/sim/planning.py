"""A* path planning over the free cells of a grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..gridmap import OccupancyGrid
from ..kernels import FREE


class PlanningError(ValueError):
    pass


@dataclass
class Path:
    length: float  # meters
    cells: list  # [(r, c), ...] from start to goal inclusive


def _unwind(parent, goal, width):
    seq = [goal]
    cur = goal
    while parent[cur] >= 0:
        cur = int(parent[cur])
        seq.append(cur)
    seq.reverse()
    return [(i // width, i % width) for i in seq]


def plan_path(grid: OccupancyGrid, start, goal, passable=None):
    """Shortest 8-connected path from ``start`` to ``goal``; ``None`` when unreachable.

    Straight steps cost one resolution, diagonal steps sqrt(2) times that.
    """
    if passable is None:
        passable = grid.cells == FREE
    sr, sc = start
    gr, gc = goal
    h, w = passable.shape
    if not (0 <= sr < h and 0 <= sc < w) or not passable[sr, sc]:
        raise PlanningError(f"start cell {start} is not free")
    if not (0 <= gr < h and 0 <= gc < w) or not passable[gr, gc]:
        return None
    s = sr * w + sc
    g = gr * w + gc
    if s == g:
        return Path(0.0, [(sr, sc)])
    length, parent = kernels.astar(np.ascontiguousarray(passable), s, g, grid.resolution)
    if length < 0:
        return None
    return Path(float(length), _unwind(parent, g, w))
