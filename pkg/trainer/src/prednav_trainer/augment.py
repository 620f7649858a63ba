"""Rotation augmentation for trinary map pairs.

Nearest-neighbor resampling about the map center; cells swept in from
outside the source become Unknown. Input and target rotate by the same
angle so their co-centered geometry is preserved.
"""

from __future__ import annotations

import numpy as np

from . import UNKNOWN
from .worlds import TrainSample


def _rotate_cells(cells: np.ndarray, angle: float) -> np.ndarray:
    # forward scatter: every source cell lands on at most one destination,
    # so the non-Unknown count can only shrink (collisions and cells swept
    # outside are lost; unhit destinations stay Unknown)
    n = cells.shape[0]
    c = (n - 1) / 2.0
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    cos, sin = np.cos(angle), np.sin(angle)
    dx, dy = xs - c, ys - c
    tx = cos * dx - sin * dy + c
    ty = sin * dx + cos * dy + c
    ix = np.floor(tx + 0.5).astype(int)
    iy = np.floor(ty + 0.5).astype(int)
    ok = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    out = np.full_like(cells, UNKNOWN)
    out[iy[ok], ix[ok]] = cells[ok]
    return out


def augment_rotate(sample: TrainSample, angle: float) -> TrainSample:
    if angle == 0.0:
        return TrainSample(input=sample.input.copy(), target=sample.target.copy())
    return TrainSample(
        input=_rotate_cells(sample.input, angle),
        target=_rotate_cells(sample.target, angle),
    )
