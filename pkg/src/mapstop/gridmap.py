"""Ternary occupancy grids, their image encoding, and PGM I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .kernels import FREE, OCCUPIED, UNKNOWN


class CellState(IntEnum):
    FREE = FREE
    OCCUPIED = OCCUPIED
    UNKNOWN = UNKNOWN


# cell code -> network pixel value
PIXEL_VALUE = np.array([1.0, 0.0, 0.5], dtype=np.float32)
# cell code -> 8-bit gray level
GRAY_LEVEL = np.array([255, 0, 127], dtype=np.uint8)


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class PgmFormatError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    """Row-major raster of cell codes.  Row index grows with y, column with x."""

    cells: np.ndarray
    resolution: float

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2 or self.cells.shape[0] < 1 or self.cells.shape[1] < 1:
            raise ShapeError(f"grid must be a non-empty 2-D array, got shape {self.cells.shape}")
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if self.cells.size and self.cells.max() > UNKNOWN:
            raise ValueError("cell codes must be 0 (free), 1 (occupied) or 2 (unknown)")
        self.resolution = float(self.resolution)

    @classmethod
    def unknown(cls, height, width, resolution):
        return cls(np.full((height, width), UNKNOWN, dtype=np.uint8), resolution)

    @property
    def height(self):
        return self.cells.shape[0]

    @property
    def width(self):
        return self.cells.shape[1]

    @property
    def shape(self):
        return self.cells.shape

    @property
    def cell_area(self):
        return self.resolution**2

    @property
    def total_area(self):
        return self.width * self.height * self.cell_area

    def known(self):
        return self.cells != UNKNOWN

    def copy(self):
        return OccupancyGrid(self.cells.copy(), self.resolution)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.cells, other.cells)


@dataclass(frozen=True)
class MapImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ShapeError(f"map image must be square, got {px.shape}")

    @property
    def side(self):
        return self.pixels.shape[0]


def check_same_frame(a: OccupancyGrid, b: OccupancyGrid):
    if a.shape != b.shape or a.resolution != b.resolution:
        raise ShapeError(
            f"grid mismatch: {a.shape}@{a.resolution} vs {b.shape}@{b.resolution}"
        )


def area_ratio(partial: OccupancyGrid, full: OccupancyGrid) -> float:
    """Fraction of the full map's known cells that are also known in ``partial``."""
    check_same_frame(partial, full)
    ref = full.known()
    n_ref = int(ref.sum())
    if n_ref == 0:
        raise DegenerateInputError("full map has no known cells")
    covered = int((ref & partial.known()).sum())
    return covered / n_ref


def known_bbox(grid: OccupancyGrid):
    """(r0, r1, c0, c1) half-open bounding box of known cells, or None."""
    known = grid.known()
    rows = np.flatnonzero(known.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(known.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def to_image(grid: OccupancyGrid, side: int = 128) -> MapImage:
    """Center the known region in a ``side`` x ``side`` image, nearest-neighbour scaled."""
    if side < 16:
        raise ValueError(f"image side must be >= 16, got {side}")
    return MapImage(_render(grid, side))


def _render(grid, side):
    img = np.full((side, side), 0.5, dtype=np.float32)
    box = known_bbox(grid)
    if box is None:
        return img
    r0, r1, c0, c1 = box
    bh, bw = r1 - r0, c1 - c0
    scale = side / max(bh, bw)
    sh = min(side, max(1, int(round(bh * scale))))
    sw = min(side, max(1, int(round(bw * scale))))
    top = (side - sh) // 2
    left = (side - sw) // 2
    src_r = r0 + np.minimum(((np.arange(sh) + 0.5) * bh / sh).astype(np.int64), bh - 1)
    src_c = c0 + np.minimum(((np.arange(sw) + 0.5) * bw / sw).astype(np.int64), bw - 1)
    img[top : top + sh, left : left + sw] = PIXEL_VALUE[grid.cells[np.ix_(src_r, src_c)]]
    return img


def diff_norm(a: MapImage, b: MapImage) -> float:
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"image size mismatch: {a.pixels.shape} vs {b.pixels.shape}")
    d = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.sqrt(np.sum(d * d)))


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def encode_pgm(grid: OccupancyGrid) -> bytes:
    header = f"P5\n# resolution {grid.resolution!r}\n{grid.width} {grid.height}\n255\n"
    return header.encode("ascii") + GRAY_LEVEL[grid.cells].tobytes()


def save_pgm(grid: OccupancyGrid, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(grid))
    return path


_RES_RE = re.compile(rb"#\s*resolution\s+(\S+)\s*$")


def _read_token(data: bytes, pos: int):
    """Next whitespace-delimited header token; comments between tokens are collected."""
    comments = []
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            end = n if end < 0 else end
            comments.append((pos, data[pos:end]))
            pos = end + 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmFormatError(f"unexpected end of header at byte {start}")
    return data[start:pos], pos, comments


def decode_pgm(data: bytes) -> OccupancyGrid:
    magic, pos, comments = _read_token(data, 0)
    if magic != b"P5":
        raise PgmFormatError(f"bad magic {magic!r} at byte 0, expected P5")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos, more = _read_token(data, pos)
        comments += more
        try:
            fields.append(int(tok))
        except ValueError:
            raise PgmFormatError(f"non-integer header field {tok!r} near byte {start}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmFormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PgmFormatError(f"maxval must be 255, got {maxval}")
    resolution = None
    for off, line in comments:
        m = _RES_RE.match(line.strip())
        if m:
            try:
                resolution = float(m.group(1))
            except ValueError:
                raise PgmFormatError(f"bad resolution value in comment at byte {off}") from None
    if resolution is None:
        raise PgmFormatError("missing '# resolution <meters>' comment")
    pos += 1  # single whitespace byte after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos) if (
        len(data) - pos >= width * height
    ) else None
    if raw is None:
        raise PgmFormatError(
            f"raster truncated: need {width * height} bytes from byte {pos}, have {len(data) - pos}"
        )
    cells = np.full(raw.shape, 255, dtype=np.uint8)
    cells[raw <= 1] = OCCUPIED
    cells[(raw >= 126) & (raw <= 128)] = UNKNOWN
    cells[raw >= 254] = FREE
    bad = np.flatnonzero(cells == 255)
    if bad.size:
        i = int(bad[0])
        raise PgmFormatError(f"inadmissible gray level {raw[i]} at byte offset {pos + i}")
    return OccupancyGrid(cells.reshape(height, width), resolution)


def load_pgm(path) -> OccupancyGrid:
    return decode_pgm(Path(path).read_bytes())


def save_gray(pixels, path):
    """Write a float image in [0, 1] as an 8-bit P5 file (no resolution tag)."""
    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def save_ppm(rgb, path):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
