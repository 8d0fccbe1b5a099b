"""Nearest-frontier exploration producing timestamped snapshot sequences."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..gridmap import OccupancyGrid, load_pgm, save_pgm
from ..kernels import FREE, OCCUPIED, SQRT2
from ..stopping import History, NoFrontiers
from .frontiers import EIGHT, detect_frontiers
from .planning import plan_path
from .sensor import Pose, SensorConfig, integrate_scan, raycast

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RobotConfig:
    speed: float = 0.5  # m/s
    replan_period: float = 1.0  # s


@dataclass
class Snapshot:
    t: float
    map: OccupancyGrid


@dataclass
class ExplorationRun:
    env_id: str
    seed: int
    snapshots: list
    total_time: float
    terminal_reason: str
    trajectory: list = field(default_factory=list)  # (t, x, y, heading) per scan

    @property
    def final_map(self):
        return self.snapshots[-1].map

    def manifest(self, pgm_paths):
        return {
            "env_id": self.env_id,
            "seed": self.seed,
            "T_seconds": self.total_time,
            "terminal_reason": self.terminal_reason,
            "snapshots": [{"t": s.t, "pgm_path": str(p)} for s, p in zip(self.snapshots, pgm_paths)],
        }

    def save(self, directory):
        """Write one PGM per snapshot plus ``run.json``; paths in the manifest are relative."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, snap in enumerate(self.snapshots):
            name = f"snap_{i:04d}.pgm"
            save_pgm(snap.map, directory / name)
            names.append(name)
        (directory / "run.json").write_text(json.dumps(self.manifest(names), indent=1))
        return directory / "run.json"

    @classmethod
    def load(cls, manifest_path):
        manifest_path = Path(manifest_path)
        meta = json.loads(manifest_path.read_text())
        snaps = [
            Snapshot(float(s["t"]), load_pgm(manifest_path.parent / s["pgm_path"]))
            for s in meta["snapshots"]
        ]
        return cls(meta["env_id"], int(meta["seed"]), snaps, float(meta["T_seconds"]),
                   meta["terminal_reason"])


def reachable_mask(passable, cell):
    labels, _ = ndimage.label(passable, structure=EIGHT)
    lab = labels[cell]
    if lab == 0:
        return np.zeros_like(passable)
    return labels == lab


def select_target(grid, cell, frontiers, passable=None):
    """Path to the frontier whose centroid-nearest reachable cell is closest by A*."""
    if passable is None:
        passable = grid.cells == FREE
    reach = reachable_mask(passable, cell)
    best = None
    for cluster in frontiers:
        goal = None
        for i in cluster.nearest_to_centroid():
            rc = tuple(int(v) for v in cluster.cells[i])
            if reach[rc]:
                goal = rc
                break
        if goal is None:
            continue
        path = plan_path(grid, cell, goal, passable)
        if path is not None and (best is None or path.length < best.length):
            best = path
    return best


def random_free_cell(env, rng):
    free = np.flatnonzero(env.truth.cells.ravel() == FREE)
    i = int(free[rng.integers(free.size)])
    return divmod(i, env.truth.width)


def explore(env, sensor: SensorConfig = SensorConfig(), robot: RobotConfig = RobotConfig(),
            stop=None, snapshot_every: float = 60.0, seed: int = 0, env_id: str = "env",
            start=None, max_time: float = 4 * 3600.0, min_frontier_cells: int = 3,
            hold: bool = False):
    """Explore ``env`` from ``start`` (random free cell by default) until ``stop`` fires.

    Every ``robot.replan_period`` seconds the robot scans, integrates, picks
    the nearest frontier and advances ``speed * period`` meters along the A*
    path.  The run also ends when no frontier is left (``no-frontiers``) or no
    frontier can be reached (``unreachable-frontiers``).  With ``hold`` the
    robot instead keeps scanning in place once frontiers are exhausted, so a
    map-difference criterion such as :class:`Baseline` decides the end time.
    """
    if snapshot_every <= 0:
        raise ValueError("snapshot_every must be > 0")
    stop = stop if stop is not None else NoFrontiers()
    rng = np.random.default_rng(seed)
    truth = env.truth
    res = truth.resolution
    if start is None:
        start = random_free_cell(env, rng)
    if truth.cells[start] != FREE:
        raise ValueError(f"start cell {start} is not free")
    pose = Pose.at_cell(start[0], start[1], res, float(rng.uniform(0, 2 * math.pi)))
    grid = OccupancyGrid.unknown(truth.height, truth.width, res)
    banned = np.zeros(truth.shape, dtype=bool)  # frontier cells that a visit failed to clear

    snapshots = []
    trajectory = []
    t = 0.0
    next_snap = 0.0
    carry = 0.0
    step_no = 0
    goal = None
    reason = None
    while True:
        scan = raycast(env, pose, sensor, rng)
        integrate_scan(grid, scan)
        cell = pose.cell(res)
        trajectory.append((t, pose.x, pose.y, pose.heading))
        if t >= next_snap - 1e-9:
            snapshots.append(Snapshot(t, grid.copy()))
            while next_snap <= t + 1e-9:
                next_snap += snapshot_every
        if goal is not None and cell == goal:
            banned[goal] = True  # reached it; whatever frontier remains here is unobservable
            goal = None
        passable = grid.cells == FREE
        masked = grid if not banned.any() else _mask_banned(grid, banned)
        frontiers = detect_frontiers(masked, min_frontier_cells)
        decision = stop.should_stop(History(snapshots, t, frontiers))
        if decision.stop:
            reason = decision.reason
            break
        if not frontiers and not hold:
            reason = "no-frontiers"
            break
        if t >= max_time:
            reason = "time-cap"
            break
        path = select_target(grid, cell, frontiers, passable) if frontiers else None
        if path is None:
            if not hold:
                reason = "unreachable-frontiers"
                break
            t = round(t + robot.replan_period, 9)  # idle: keep scanning in place
            continue
        goal = path.cells[-1]
        budget = robot.speed * robot.replan_period + carry
        heading = pose.heading
        cur = path.cells[0]
        for nxt in path.cells[1:]:
            cost = res * (SQRT2 if (nxt[0] != cur[0] and nxt[1] != cur[1]) else 1.0)
            if cost > budget:
                break
            if truth.cells[nxt] != FREE:
                grid.cells[nxt] = OCCUPIED  # bumper contact
                budget = 0.0
                break
            budget -= cost
            heading = math.atan2(nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
        carry = 0.0 if cur == path.cells[-1] else budget
        pose = Pose.at_cell(cur[0], cur[1], res, heading)
        t = round(t + robot.replan_period, 9)
        step_no += 1

    if snapshots[-1].t != t:
        snapshots.append(Snapshot(t, grid.copy()))
    if banned.any():
        log.debug("run %s/%d: %d frontier cells banned", env_id, seed, int(banned.sum()))
    return ExplorationRun(env_id, seed, snapshots, t, reason, trajectory)


def _mask_banned(grid, banned):
    # banned free cells are reported as occupied only for frontier detection
    cells = grid.cells.copy()
    cells[banned & (cells == FREE)] = OCCUPIED
    return OccupancyGrid(cells, grid.resolution)
