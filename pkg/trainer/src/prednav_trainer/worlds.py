"""Procedural corridor worlds and self-supervised training pairs.

A world is an axis-aligned corridor polyline rasterized onto a grid: wall
cells along the offset boundary, free interior, unknown outside. A training
sample pairs a limited-range visibility rendering around a pose (what a
robot would have mapped) with the fully explored ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import FREE, INPUT_SIZE, OCCUPIED, OUTPUT_SIZE, UNKNOWN

RESOLUTION = 0.05
SENSOR_RANGE = 3.0
VIS_RAYS = 360


@dataclass
class TrainSample:
    input: np.ndarray  # (120, 120) uint8
    target: np.ndarray  # (150, 150) uint8

    def __post_init__(self):
        if self.input.shape != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"input must be {INPUT_SIZE}x{INPUT_SIZE}")
        if self.target.shape != (OUTPUT_SIZE, OUTPUT_SIZE):
            raise ValueError(f"target must be {OUTPUT_SIZE}x{OUTPUT_SIZE}")


def _corridor_world(rng, canvas=360):
    """Ground-truth grid (canvas x canvas) and the open-space cell list."""
    cells = np.full((canvas, canvas), UNKNOWN, dtype=np.uint8)
    # axis-aligned centerline random walk
    x = canvas // 2 + rng.integers(-40, 40)
    y = canvas // 2 + rng.integers(-40, 40)
    half = int(rng.uniform(0.8, 1.25) / RESOLUTION)
    heading = rng.integers(0, 4)  # 0:+x 1:+y 2:-x 3:-y
    pts = [(x, y)]
    for _ in range(int(rng.integers(2, 5))):
        step = int(rng.uniform(3.0, 6.0) / RESOLUTION)
        dx, dy = ((1, 0), (0, 1), (-1, 0), (0, -1))[heading]
        x = int(np.clip(x + dx * step, half + 2, canvas - half - 3))
        y = int(np.clip(y + dy * step, half + 2, canvas - half - 3))
        pts.append((x, y))
        turn = int(rng.integers(0, 2)) * 2 - 1
        heading = (heading + turn) % 4

    # carve free space: union of rectangles along the legs
    free = np.zeros_like(cells, dtype=bool)
    for (x1, y1), (x2, y2) in zip(pts[:-1], pts[1:]):
        x_lo, x_hi = sorted((x1, x2))
        y_lo, y_hi = sorted((y1, y2))
        free[y_lo - half : y_hi + half + 1, x_lo - half : x_hi + half + 1] = True
    cells[free] = FREE
    # walls: the 1-cell boundary ring of the free region
    shifted = np.zeros_like(free)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted[
                max(0, dy) : canvas + min(0, dy), max(0, dx) : canvas + min(0, dx)
            ] |= free[max(0, -dy) : canvas + min(0, -dy), max(0, -dx) : canvas + min(0, -dx)]
    walls = shifted & ~free
    cells[walls] = OCCUPIED
    return cells, np.argwhere(free)


def _visibility(gt: np.ndarray, cy: int, cx: int) -> np.ndarray:
    """Limited-range ray-cast rendering of ``gt`` from cell (cy, cx)."""
    out = np.full_like(gt, UNKNOWN)
    h, w = gt.shape
    max_steps = int(SENSOR_RANGE / RESOLUTION)
    angles = np.linspace(0.0, 2.0 * np.pi, VIS_RAYS, endpoint=False)
    for a in angles:
        dx, dy = np.cos(a), np.sin(a)
        for step in range(max_steps + 1):
            ix = int(round(cx + dx * step))
            iy = int(round(cy + dy * step))
            if not (0 <= ix < w and 0 <= iy < h):
                break
            if gt[iy, ix] == OCCUPIED:
                out[iy, ix] = OCCUPIED
                break
            out[iy, ix] = FREE
    return out


def _crop(cells, cy, cx, size):
    out = np.full((size, size), UNKNOWN, dtype=np.uint8)
    y0, x0 = cy - size // 2, cx - size // 2
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, cells.shape[0]), min(x0 + size, cells.shape[1])
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = cells[sy0:sy1, sx0:sx1]
    return out


def generate_dataset(n: int, seed: int = 0, poses_per_world: int = 4) -> list[TrainSample]:
    """Deterministic procedural samples: visibility input vs explored truth."""
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(seed)
    samples = []
    while len(samples) < n:
        gt, open_cells = _corridor_world(rng)
        if len(open_cells) == 0:
            continue
        for _ in range(poses_per_world):
            if len(samples) >= n:
                break
            cy, cx = open_cells[rng.integers(0, len(open_cells))]
            vis = _visibility(gt, cy, cx)
            samples.append(
                TrainSample(
                    input=_crop(vis, cy, cx, INPUT_SIZE),
                    target=_crop(gt, cy, cx, OUTPUT_SIZE),
                )
            )
    return samples
