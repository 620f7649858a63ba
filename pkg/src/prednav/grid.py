"""Trinary occupancy grids: coordinate transforms, submaps, morphology, fusion,
and clearance queries.

Cells are Free (0), Occupied (1) or Unknown (2); these byte codes are the
serialization contract for every file format in the project. Grids are value
snapshots: the cell array is frozen after construction and all operations
return new grids, so instances are safe to share across threads.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

DEFAULT_RESOLUTION = 0.05  # m / cell


class Cell(IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


FREE = int(Cell.FREE)
OCCUPIED = int(Cell.OCCUPIED)
UNKNOWN = int(Cell.UNKNOWN)


class OutOfBoundsError(ValueError):
    """World point outside the grid extent."""


class GridMismatchError(ValueError):
    """Two grids that must be co-registered are not."""


class GridFormatError(ValueError):
    """Malformed grid file."""


@dataclass(frozen=True)
class OccupancyGrid:
    """Axis-aligned trinary grid.

    ``origin`` is the world position of the corner of cell (0, 0); cell
    (ix, iy) covers the half-open square
    [origin + ix*res, origin + (ix+1)*res) x [origin + iy*res, ...).
    ``cells`` is row-major with shape (height, width), indexed cells[iy, ix].
    """

    resolution: float
    origin: tuple[float, float]
    cells: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2:
            raise ValueError("cells must be 2-D (height, width)")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def full(cls, width, height, value, resolution=DEFAULT_RESOLUTION, origin=(0.0, 0.0)):
        return cls(resolution, origin, np.full((height, width), int(value), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self):
        """(xmin, ymin, xmax, ymax) in meters."""
        ox, oy = self.origin
        return (ox, oy, ox + self.width * self.resolution, oy + self.height * self.resolution)

    @property
    def center(self):
        xmin, ymin, xmax, ymax = self.extent
        return (0.5 * (xmin + xmax), 0.5 * (ymin + ymax))

    def contains(self, p) -> bool:
        xmin, ymin, xmax, ymax = self.extent
        return xmin <= p[0] < xmax and ymin <= p[1] < ymax

    def world_to_cell(self, p) -> tuple[int, int]:
        """Cell index (ix, iy) = floor((p - origin) / resolution).

        ix is the column, iy the row; the grid value lives at cells[iy, ix].
        Raises OutOfBoundsError for points outside the extent.
        """
        if not self.contains(p):
            raise OutOfBoundsError(f"point {tuple(p)} outside grid extent {self.extent}")
        ix = int(np.floor((p[0] - self.origin[0]) / self.resolution))
        iy = int(np.floor((p[1] - self.origin[1]) / self.resolution))
        # floor() on the boundary of the last cell can round up; clamp.
        return min(ix, self.width - 1), min(iy, self.height - 1)

    def cell_to_world(self, ix, iy):
        """World coordinates of the center of cell (ix, iy)."""
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def value_at(self, p) -> int:
        ix, iy = self.world_to_cell(p)
        return int(self.cells[iy, ix])

    def mutable_cells(self) -> np.ndarray:
        """Writable copy of the cell array (grids themselves stay frozen)."""
        return self.cells.copy()

    def with_cells(self, cells) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin, cells)

    @cached_property
    def _occupied_tree(self):
        """KD-tree over occupied cell centers; None if the grid has none."""
        iy, ix = np.nonzero(self.cells == OCCUPIED)
        if len(ix) == 0:
            return None
        pts = np.column_stack(
            [
                self.origin[0] + (ix + 0.5) * self.resolution,
                self.origin[1] + (iy + 0.5) * self.resolution,
            ]
        )
        return cKDTree(pts)


class Provenance(IntEnum):
    OBSERVED = 0
    PREDICTED = 1


@dataclass(frozen=True)
class PlanningMap:
    """Fused map the planners consume: grid plus per-cell provenance.

    Invariant (enforced by fuse): every Predicted-provenance cell was Unknown
    in (or outside) the observed source grid.
    """

    grid: OccupancyGrid
    provenance: np.ndarray = field(repr=False)

    def __post_init__(self):
        prov = np.ascontiguousarray(self.provenance, dtype=np.uint8)
        if prov.shape != self.grid.cells.shape:
            raise GridMismatchError("provenance mask shape differs from grid")
        prov.flags.writeable = False
        object.__setattr__(self, "provenance", prov)

    @property
    def cells(self):
        return self.grid.cells

    @property
    def resolution(self):
        return self.grid.resolution


def _require_lattice_aligned(a: OccupancyGrid, b: OccupancyGrid):
    """Same resolution and cell lattices offset by a whole number of cells."""
    if abs(a.resolution - b.resolution) > 1e-12 * max(a.resolution, b.resolution):
        raise GridMismatchError("resolutions differ")
    res = a.resolution
    for k in (0, 1):
        off = (b.origin[k] - a.origin[k]) / res
        if abs(off - round(off)) > 1e-6:
            raise GridMismatchError("grid lattices are not aligned")


def _cell_offset(inner: OccupancyGrid, outer: OccupancyGrid):
    res = outer.resolution
    return (
        round((inner.origin[0] - outer.origin[0]) / res),
        round((inner.origin[1] - outer.origin[1]) / res),
    )


def world_to_cell(p, g: OccupancyGrid) -> tuple[int, int]:
    return g.world_to_cell(p)


def extract_submap(g: OccupancyGrid, center, side: float) -> OccupancyGrid:
    """Square submap of ceil(side/resolution) cells per edge around ``center``.

    The submap origin snaps to the source cell lattice (the geometric center
    moves by at most half a cell), so submaps of different sizes taken around
    the same center are exactly co-registered. Cells outside the source
    extent come back Unknown.
    """
    if side <= 0:
        raise ValueError("side must be > 0")
    res = g.resolution
    n = int(np.ceil(side / res - 1e-9))
    x0 = int(np.floor((center[0] - g.origin[0]) / res - n / 2 + 0.5))
    y0 = int(np.floor((center[1] - g.origin[1]) / res - n / 2 + 0.5))
    out = np.full((n, n), UNKNOWN, dtype=np.uint8)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + n, g.width), min(y0 + n, g.height)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = g.cells[sy0:sy1, sx0:sx1]
    origin = (g.origin[0] + x0 * res, g.origin[1] + y0 * res)
    return OccupancyGrid(res, origin, out)


def morphological_close(g: OccupancyGrid, kernel: int = 5) -> OccupancyGrid:
    """Dilation then erosion of the Occupied mask with a square element.

    Runs on a zero-padded copy so the result equals the mathematical closing
    on the infinite plane: extensive (never removes occupied cells) and
    idempotent. Cells turned Occupied overwrite Free/Unknown; everything else
    keeps its Free/Unknown distinction.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    if kernel == 1:
        return g
    occ = g.cells == OCCUPIED
    if not occ.any():
        return g
    pad = kernel
    padded = np.pad(occ, pad)
    se = np.ones((kernel, kernel), dtype=bool)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    closed = closed[pad:-pad, pad:-pad]
    out = g.mutable_cells()
    out[closed] = OCCUPIED
    return g.with_cells(out)


def fuse(observed: OccupancyGrid, predicted: OccupancyGrid) -> PlanningMap:
    """Fill observed-Unknown cells from the predicted grid.

    Requires co-registered grids with the predicted extent covering the
    observed extent. Observed non-Unknown cells pass through untouched; every
    cell whose value came from ``predicted`` (including Unknown ones) is
    tagged Predicted.
    """
    _require_lattice_aligned(observed, predicted)
    dx, dy = _cell_offset(observed, predicted)
    if dx < 0 or dy < 0 or dx + observed.width > predicted.width or dy + observed.height > predicted.height:
        raise GridMismatchError("predicted extent does not cover observed extent")
    co, cp = observed.center, predicted.center
    if max(abs(co[0] - cp[0]), abs(co[1] - cp[1])) > 0.5 * observed.resolution + 1e-9:
        raise GridMismatchError("grids are not co-centered")

    out = predicted.cells.copy()
    prov = np.full(out.shape, int(Provenance.PREDICTED), dtype=np.uint8)
    obs = observed.cells
    window = out[dy : dy + observed.height, dx : dx + observed.width]
    keep = obs != UNKNOWN
    window[keep] = obs[keep]
    prov[dy : dy + observed.height, dx : dx + observed.width][keep] = int(Provenance.OBSERVED)
    grid = OccupancyGrid(predicted.resolution, predicted.origin, out)
    return PlanningMap(grid, prov)


def apply_patch(base: OccupancyGrid, patch: PlanningMap) -> PlanningMap:
    """Write a fused local patch back into a full-extent map.

    Only Predicted-provenance patch cells are copied (Observed ones already
    equal the base); patch cells outside the base extent are dropped.
    Returns a full-extent PlanningMap.
    """
    _require_lattice_aligned(base, patch.grid)
    dx, dy = _cell_offset(patch.grid, base)
    out = base.mutable_cells()
    prov = np.zeros(out.shape, dtype=np.uint8)
    ph, pw = patch.grid.cells.shape
    # clip patch to the base extent
    px0, py0 = max(0, -dx), max(0, -dy)
    px1, py1 = min(pw, base.width - dx), min(ph, base.height - dy)
    if px0 < px1 and py0 < py1:
        sub = (slice(py0 + dy, py1 + dy), slice(px0 + dx, px1 + dx))
        pred = patch.provenance[py0:py1, px0:px1] == int(Provenance.PREDICTED)
        out[sub][pred] = patch.grid.cells[py0:py1, px0:px1][pred]
        prov[sub][pred] = int(Provenance.PREDICTED)
    return PlanningMap(OccupancyGrid(base.resolution, base.origin, out), prov)


def _grid_of(g) -> OccupancyGrid:
    return g.grid if isinstance(g, PlanningMap) else g


def clearance(g, p) -> float:
    """Euclidean distance from p to the nearest Occupied cell center.

    Unknown cells are not obstacles. Returns +inf when the grid has no
    occupied cells. Raises OutOfBoundsError for points outside the extent.
    """
    grid = _grid_of(g)
    if not grid.contains(p):
        raise OutOfBoundsError(f"point {tuple(p)} outside grid extent {grid.extent}")
    tree = grid._occupied_tree
    if tree is None:
        return float("inf")
    d, _ = tree.query([p[0], p[1]])
    # Recompute over all near-minimal candidates with plain sqrt(dx^2+dy^2)
    # so the result matches an exhaustive scan bit for bit (the tree's
    # internal arithmetic can differ in the last ulp).
    idx = tree.query_ball_point([p[0], p[1]], float(d) * (1.0 + 1e-9) + 1e-12)
    pts = tree.data[idx]
    dx = pts[:, 0] - p[0]
    dy = pts[:, 1] - p[1]
    return float(np.sqrt(dx * dx + dy * dy).min())


def clearance_batch(g, pts) -> np.ndarray:
    """Vectorized clearance for an (n, 2) array of points; no bounds check.

    Out-of-extent points get the distance to the nearest occupied center all
    the same (useful to collision-check candidate paths that leave the map).
    """
    grid = _grid_of(g)
    pts = np.asarray(pts, dtype=float)
    tree = grid._occupied_tree
    if tree is None:
        return np.full(len(pts), np.inf)
    _, idx = tree.query(pts)
    delta = tree.data[idx] - pts
    return np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)


# ---------------------------------------------------------------------------
# Grid file format: text header + raw row-major cell bytes. Bit-exact
# round-trip contract shared with the trainer package.
#
#   line 1: "OG01"
#   line 2: "<width> <height>"
#   line 3: "<resolution>"            (repr of the float)
#   line 4: "<origin_x> <origin_y>"   (reprs)
#   then exactly width*height bytes, each 0/1/2, row-major from row 0.
# ---------------------------------------------------------------------------

GRID_MAGIC = b"OG01"


def save_grid(g: OccupancyGrid, path):
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + b"\n")
        f.write(f"{g.width} {g.height}\n".encode())
        f.write(f"{g.resolution!r}\n".encode())
        f.write(f"{g.origin[0]!r} {g.origin[1]!r}\n".encode())
        f.write(g.cells.tobytes())


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.readline().strip() != GRID_MAGIC:
        raise GridFormatError("bad grid file magic")
    try:
        w, h = (int(v) for v in buf.readline().split())
        res = float(buf.readline())
        ox, oy = (float(v) for v in buf.readline().split())
    except ValueError as e:
        raise GridFormatError(f"bad grid header: {e}") from e
    body = buf.read()
    if len(body) != w * h:
        raise GridFormatError(f"expected {w * h} cell bytes, got {len(body)}")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if cells.max(initial=0) > UNKNOWN:
        raise GridFormatError("cell byte outside {0,1,2}")
    return OccupancyGrid(res, (ox, oy), cells)
