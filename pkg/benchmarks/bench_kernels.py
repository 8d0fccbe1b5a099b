"""Time each numba kernel against its numpy fallback on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are imported directly, so the MAPSTOP_DISABLE_NUMBA flag does
not matter here.  The first numba call (compilation or cache load) is
excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from mapstop import kernels
from mapstop.gridmap import FREE, OCCUPIED, OccupancyGrid
from mapstop.sim.envgen import generate_environment
from mapstop.sim.sensor import SensorConfig, beam_angles, hit_margin


def cases():
    env = generate_environment(0)
    truth = env.truth
    res = truth.resolution
    occ = truth.cells == OCCUPIED
    free = np.argwhere(truth.cells == FREE)
    r, c = free[len(free) // 2]
    x, y = (c + 0.5) * res, (r + 0.5) * res
    sensor = SensorConfig()
    angles = beam_angles(0.3, sensor.beams)
    ranges, hits = kernels.cast_rays_numpy(occ, x, y, angles, sensor.max_range, res)
    margin = hit_margin(res, sensor.range_noise_sigma)
    w = truth.cells.shape[1]
    start, goal = int(free[0][0] * w + free[0][1]), int(free[-1][0] * w + free[-1][1])  # flat indices
    passable = np.ascontiguousarray(truth.cells == FREE)
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(m, 0.3, size=(300, 2)) for m in rng.random((5, 2)) * 10])
    feat = rng.standard_normal((8, 16, 64, 64))
    out, arg = kernels.maxpool_forward_numpy(feat)
    dout = rng.standard_normal(out.shape)
    blank = OccupancyGrid.unknown(*truth.cells.shape, res).cells

    return {
        f"cast_rays ({sensor.beams} beams)": lambda v: getattr(kernels, f"cast_rays_{v}")(
            occ, x, y, angles, sensor.max_range, res),
        f"integrate_rays ({sensor.beams} beams)": lambda v: getattr(kernels, f"integrate_rays_{v}")(
            blank.copy(), x, y, angles, ranges, hits, res, margin),
        f"astar ({truth.cells.shape[0]}x{truth.cells.shape[1]})": lambda v: getattr(kernels, f"astar_{v}")(
            passable, start, goal, res),
        f"dbscan ({len(pts)} points)": lambda v: getattr(kernels, f"dbscan_{v}")(pts, 0.3, 4),
        "maxpool fwd+bwd (8x16x64x64)": lambda v: getattr(kernels, f"maxpool_backward_{v}")(
            dout, getattr(kernels, f"maxpool_forward_{v}")(feat)[1], 64, 64),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        fn("numba")  # compile / load cache
        t = {}
        for v in ("numba", "numpy"):
            t[v] = min(timeit.repeat(lambda: fn(v), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t['numba']:10.3f} {t['numpy']:10.3f} {t['numpy'] / t['numba']:7.1f}x")


if __name__ == "__main__":
    main()
