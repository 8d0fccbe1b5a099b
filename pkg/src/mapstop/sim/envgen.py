"""BSP floor-plan generator.

The building footprint is recursively partitioned into axis-aligned rooms
separated by 1-cell walls.  Large partitions may be split by a corridor
strip instead of a single wall.  Every split wall gets at least one door, so
the split tree guarantees that free space is connected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..gridmap import OccupancyGrid
from ..kernels import FREE, OCCUPIED, UNKNOWN

EIGHT = np.ones((3, 3), dtype=bool)


class GenerationError(RuntimeError):
    pass


@dataclass
class EnvParams:
    rooms_min: int = 6
    rooms_max: int = 12
    cell_resolution: float = 0.2
    extent: tuple = (80, 100)  # rows, cols including the outer wall
    min_room: int = 12  # minimum interior side of a room, cells
    door_width: tuple = (3, 5)  # inclusive range, cells
    corridor_width: tuple = (3, 5)
    corridor_prob: float = 0.5
    extra_door_prob: float = 0.25
    void_prob: float = 0.3
    max_retries: int = 100

    def validate(self):
        h, w = self.extent
        if h < 20 or w < 20:
            raise ValueError(f"extent must be at least 20x20 cells, got {self.extent}")
        if self.rooms_min < 2 or self.rooms_max < self.rooms_min:
            raise ValueError(f"bad room range {self.rooms_min}..{self.rooms_max}")
        if self.door_width[0] < 2:
            raise ValueError("doors must be at least 2 cells wide")
        if not self.cell_resolution > 0:
            raise ValueError("cell_resolution must be > 0")

    def to_dict(self):
        d = asdict(self)
        d["extent"] = list(self.extent)
        d["door_width"] = list(self.door_width)
        d["corridor_width"] = list(self.corridor_width)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("extent", "door_width", "corridor_width"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Environment:
    truth: OccupancyGrid
    seed: int
    rooms: list = field(default_factory=list)  # (r0, c0, r1, c1) half-open interiors
    corridors: list = field(default_factory=list)

    @property
    def resolution(self):
        return self.truth.resolution

    @property
    def free(self):
        return self.truth.cells == FREE

    @property
    def meta(self):
        return {
            "rooms": len(self.rooms),
            "corridors": len(self.corridors),
            "free_area_m2": float(self.free.sum() * self.truth.cell_area),
        }

    def reference_map(self) -> OccupancyGrid:
        """The complete map: free cells plus every wall cell touching free space.

        Solid wall mass that no sensor beam can reach stays unknown so that a
        finished exploration covers the whole reference.
        """
        free = self.free
        visible = ndimage.binary_dilation(free, structure=EIGHT)
        cells = np.full(free.shape, UNKNOWN, dtype=np.uint8)
        cells[visible] = OCCUPIED
        cells[free] = FREE
        return OccupancyGrid(cells, self.resolution)


def free_components(free):
    _, n = ndimage.label(free, structure=EIGHT)
    return n


class _Rect:
    __slots__ = ("r0", "c0", "r1", "c1")

    def __init__(self, r0, c0, r1, c1):
        self.r0, self.c0, self.r1, self.c1 = r0, c0, r1, c1

    @property
    def h(self):
        return self.r1 - self.r0

    @property
    def w(self):
        return self.c1 - self.c0

    def astuple(self):
        return (self.r0, self.c0, self.r1, self.c1)


def _try_generate(rng, p: EnvParams):
    H, W = p.extent
    leaves = [_Rect(1, 1, H - 1, W - 1)]
    corridors = []
    walls = []  # (axis, index, span_lo, span_hi); axis 0 = horizontal wall at row index
    target = int(rng.integers(p.rooms_min, p.rooms_max + 1))
    total = (H - 2) * (W - 2)
    m = p.min_room

    while len(leaves) < target:
        order = sorted(range(len(leaves)), key=lambda i: (-leaves[i].h * leaves[i].w, i))
        pick = None
        for i in order:
            rect = leaves[i]
            if rect.h >= 2 * m + 1 or rect.w >= 2 * m + 1:
                pick = i
                break
        if pick is None:
            break
        rect = leaves.pop(pick)
        if rect.h >= 2 * m + 1 and rect.w >= 2 * m + 1:
            axis = 0 if rect.h > rect.w or (rect.h == rect.w and rng.random() < 0.5) else 1
        else:
            axis = 0 if rect.h >= 2 * m + 1 else 1
        lo, hi = (rect.r0, rect.r1) if axis == 0 else (rect.c0, rect.c1)
        s_lo, s_hi = (rect.c0, rect.c1) if axis == 0 else (rect.r0, rect.r1)
        cw = int(rng.integers(p.corridor_width[0], p.corridor_width[1] + 1))
        big = rect.h * rect.w >= total / 4

        def child(a, b):
            return _Rect(a, s_lo, b, s_hi) if axis == 0 else _Rect(s_lo, a, s_hi, b)

        if big and hi - lo >= 2 * m + cw + 2 and rng.random() < p.corridor_prob:
            pos = int(rng.integers(lo + m, hi - m - cw - 1))
            walls.append((axis, pos, s_lo, s_hi))
            walls.append((axis, pos + cw + 1, s_lo, s_hi))
            corridors.append(child(pos + 1, pos + 1 + cw))
            leaves.insert(pick, child(lo, pos))
            leaves.insert(pick + 1, child(pos + cw + 2, hi))
        else:
            pos = int(rng.integers(lo + m, hi - m))
            walls.append((axis, pos, s_lo, s_hi))
            leaves.insert(pick, child(lo, pos))
            leaves.insert(pick + 1, child(pos + 1, hi))

    if len(leaves) < p.rooms_min:
        return None

    cells = np.full((H, W), OCCUPIED, dtype=np.uint8)
    for rect in leaves + corridors:
        cells[rect.r0 : rect.r1, rect.c0 : rect.c1] = FREE

    # knock out a few rooms on the outer boundary for non-rectangular footprints
    rooms = list(leaves)
    if len(rooms) > p.rooms_min:
        for i in rng.permutation(len(rooms)):
            rect = rooms[i]
            on_edge = rect.r0 == 1 or rect.c0 == 1 or rect.r1 == H - 1 or rect.c1 == W - 1
            if on_edge and rng.random() < p.void_prob and len(rooms) - 1 >= p.rooms_min:
                cells[rect.r0 : rect.r1, rect.c0 : rect.c1] = OCCUPIED
                rooms[i] = None
                if sum(r is not None for r in rooms) <= p.rooms_min:
                    break
        rooms = [r for r in rooms if r is not None]

    def free_at(r, c):
        return 0 <= r < H and 0 <= c < W and cells[r, c] == FREE

    for axis, idx, s_lo, s_hi in walls:
        ok = []
        for j in range(s_lo, s_hi):
            if axis == 0:
                good = free_at(idx - 1, j) and free_at(idx + 1, j)
            else:
                good = free_at(j, idx - 1) and free_at(j, idx + 1)
            ok.append(good)
        ok = np.array(ok, dtype=bool)
        n_doors = 1 + int(rng.random() < p.extra_door_prob)
        for _ in range(n_doors):
            dw = int(rng.integers(p.door_width[0], p.door_width[1] + 1))
            if ok.size < dw:
                continue
            runs = np.convolve(ok.astype(np.int64), np.ones(dw, dtype=np.int64), mode="valid")
            starts = np.flatnonzero(runs == dw)
            if starts.size == 0:
                continue
            s = int(starts[rng.integers(starts.size)])
            for j in range(s_lo + s, s_lo + s + dw):
                if axis == 0:
                    cells[idx, j] = FREE
                else:
                    cells[j, idx] = FREE

    free = cells == FREE
    if free_components(free) != 1:
        return None
    return cells, [r.astuple() for r in rooms], [c.astuple() for c in corridors]


def generate_environment(seed: int, params: EnvParams | None = None) -> Environment:
    p = params or EnvParams()
    p.validate()
    rng = np.random.default_rng(seed)
    for _ in range(p.max_retries):
        out = _try_generate(rng, p)
        if out is not None:
            cells, rooms, corridors = out
            return Environment(OccupancyGrid(cells, p.cell_resolution), seed, rooms, corridors)
    raise GenerationError(
        f"could not generate a connected plan with {p.rooms_min}..{p.rooms_max} rooms "
        f"in extent {p.extent} after {p.max_retries} attempts"
    )
