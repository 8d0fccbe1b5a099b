"""Simulated 2-D lidar and obstacle-sticky scan integration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..gridmap import OccupancyGrid
from ..kernels import FREE, OCCUPIED


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def cell(self, resolution):
        return int(math.floor(self.y / resolution)), int(math.floor(self.x / resolution))

    @classmethod
    def at_cell(cls, r, c, resolution, heading=0.0):
        return cls((c + 0.5) * resolution, (r + 0.5) * resolution, heading)


@dataclass(frozen=True)
class SensorConfig:
    beams: int = 360
    max_range: float = 10.0
    range_noise_sigma: float = 0.02
    seed: int = 0

    def validate(self, resolution):
        if self.beams < 8:
            raise ValueError("need at least 8 beams")
        if not self.max_range > resolution:
            raise ValueError("max_range must exceed the grid resolution")
        if self.range_noise_sigma < 0:
            raise ValueError("range noise sigma must be >= 0")


@dataclass
class Scan:
    pose: Pose
    angles: np.ndarray
    ranges: np.ndarray  # measured, after noise and clamping
    hits: np.ndarray
    sigma: float = 0.0

    def __iter__(self):
        return iter(zip(self.angles.tolist(), self.ranges.tolist(), self.hits.tolist()))

    def __len__(self):
        return self.angles.shape[0]


class PoseError(ValueError):
    pass


def beam_angles(heading, beams):
    return heading + 2.0 * np.pi * np.arange(beams) / beams


def raycast(env, pose: Pose, sensor: SensorConfig, rng=None) -> Scan:
    """Trace every beam through the environment's ground truth.

    ``env`` is an :class:`Environment` or a ground-truth grid.  ``rng`` drives
    the range noise; it defaults to a generator seeded from ``sensor.seed``.
    """
    truth = getattr(env, "truth", env)
    res = truth.resolution
    sensor.validate(res)
    r, c = pose.cell(res)
    if not (0 <= r < truth.height and 0 <= c < truth.width) or truth.cells[r, c] != FREE:
        raise PoseError(f"pose {pose} is not in free space")
    angles = beam_angles(pose.heading, sensor.beams)
    occ = truth.cells == OCCUPIED
    true_range, hits = kernels.cast_rays(occ, float(pose.x), float(pose.y), angles,
                                         float(sensor.max_range), res)
    if sensor.range_noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(sensor.seed)
        noisy = true_range + rng.normal(0.0, sensor.range_noise_sigma, size=true_range.shape)
        ranges = np.clip(noisy, 0.0, sensor.max_range)
    else:
        ranges = true_range.copy()
    return Scan(pose, angles, ranges, hits, float(sensor.range_noise_sigma))


def hit_margin(resolution, sigma):
    # half-width of the window around a measured range that must hold the obstacle surface
    return min(0.5 * resolution, 4.0 * sigma)


def integrate_scan(grid: OccupancyGrid, scan: Scan) -> OccupancyGrid:
    """Update ``grid`` in place: traversed cells become free, hit cells occupied.

    Occupied cells are never turned back into free space.
    """
    res = grid.resolution
    kernels.integrate_rays(grid.cells, float(scan.pose.x), float(scan.pose.y), scan.angles,
                           scan.ranges, scan.hits, res, hit_margin(res, scan.sigma))
    return grid
